"""Binary and JSON artifact formats.

All binary formats are little-endian with fixed tensor order so files are
byte-reproducible; matrices are row-major IEEE-754 doubles. JSON artifacts
are single-line or line-delimited with fixed key order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .chunk_select import CalibrationBatch, EliteSelection
from .errors import FormatError
from .lowrank import LowRankFactors
from .model import AttentionWeights, LayerWeights, ModelConfig
from .rope import ChunkSet

MODEL_MAGIC = b"EKV1"
FACTOR_MAGIC = b"EKF1"
CALIB_MAGIC = b"EKC1"
FORMAT_VERSION = 1

_MODE_BYTE = {"jlrd": 0, "slrd": 1}
_MODE_NAME = {v: k for k, v in _MODE_BYTE.items()}


def _mat_bytes(mat: np.ndarray) -> bytes:
    return np.ascontiguousarray(mat, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"{self.path}: truncated file")
        out = self.data[self.off: self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def matrix(self, rows: int, cols: int) -> np.ndarray:
        raw = self.take(rows * cols * 8)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)

    def done(self) -> None:
        if self.off != len(self.data):
            raise FormatError(f"{self.path}: {len(self.data) - self.off} trailing bytes")


def _read_file(path) -> bytes:
    return Path(path).read_bytes()


def write_model(path, cfg: ModelConfig, weights: AttentionWeights) -> None:
    """Header: magic, u16 version, u32 l/n_h/d_h/d, f64 rope base; then per
    layer the tensors wq, wk, wv, wo."""
    weights.validate(cfg)
    parts = [struct.pack(
        "<4sHIIIId", MODEL_MAGIC, FORMAT_VERSION,
        cfg.n_layers, cfg.n_heads, cfg.head_dim, cfg.embed_dim, cfg.rope_base,
    )]
    for lw in weights.layers:
        for mat in (lw.wq, lw.wk, lw.wv, lw.wo):
            parts.append(_mat_bytes(mat))
    Path(path).write_bytes(b"".join(parts))


def read_model(path) -> tuple[ModelConfig, AttentionWeights]:
    r = _Reader(_read_file(path), path)
    magic, version, l, nh, dh, d, base = r.unpack("<4sHIIIId")
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        cfg = ModelConfig(l, nh, dh, d, base)
    except Exception as exc:
        raise FormatError(f"{path}: invalid header ({exc})") from exc
    layers = []
    for _ in range(l):
        wq = r.matrix(d, nh * dh)
        wk = r.matrix(d, nh * dh)
        wv = r.matrix(d, nh * dh)
        wo = r.matrix(nh * dh, d)
        layers.append(LayerWeights(wq=wq, wk=wk, wv=wv, wo=wo))
    r.done()
    return cfg, AttentionWeights(layers=tuple(layers))


def write_elite(path, selection: EliteSelection) -> None:
    """UTF-8 JSON: {"method", "r", "layers": [[per-head chunk lists]]}."""
    doc = {
        "method": selection.method,
        "r": selection.r,
        "layers": [
            [list(cs.indices) for cs in layer_sets] for layer_sets in selection.sets
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n", encoding="utf-8")


def read_elite(path) -> EliteSelection:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    try:
        sets = tuple(
            tuple(ChunkSet.of(head) for head in layer) for layer in doc["layers"]
        )
        return EliteSelection(method=str(doc["method"]), r=int(doc["r"]), sets=sets)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed elite document ({exc})") from exc


def write_factors(path, cfg: ModelConfig, factors: tuple[LowRankFactors, ...]) -> None:
    """Header: magic, u16 version, u8 mode, u32 l/n_h/d_h/d/r, then the rank
    fields and per-layer factor matrices in fixed order."""
    if len(factors) != cfg.n_layers:
        raise FormatError("one factor set per layer required")
    f0 = factors[0]
    parts = [struct.pack(
        "<4sHBIIIII", FACTOR_MAGIC, FORMAT_VERSION, _MODE_BYTE[f0.mode],
        cfg.n_layers, cfg.n_heads, cfg.head_dim, cfg.embed_dim, f0.elite_r,
    )]
    if f0.mode == "jlrd":
        parts.append(struct.pack("<I", f0.d_ckv))
    else:
        parts.append(struct.pack("<II", f0.d_ck, f0.d_cv))
    for f in factors:
        if f.mode != f0.mode or f.elite_r != f0.elite_r or \
                f.latent_width != f0.latent_width:
            raise FormatError("factor metadata must match across layers")
        if f.mode == "jlrd":
            parts.append(_mat_bytes(f.a_kv))
            parts.append(_mat_bytes(f.b_joint))
        else:
            parts.append(_mat_bytes(f.a_k))
            parts.append(_mat_bytes(f.b_k_sep))
            parts.append(_mat_bytes(f.a_v))
            parts.append(_mat_bytes(f.b_v_sep))
    Path(path).write_bytes(b"".join(parts))


def read_factors(path) -> tuple[ModelConfig, tuple[LowRankFactors, ...]]:
    r = _Reader(_read_file(path), path)
    magic, version, mode_b, l, nh, dh, d, elite_r = r.unpack("<4sHBIIIII")
    if magic != FACTOR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if mode_b not in _MODE_NAME:
        raise FormatError(f"{path}: unknown mode byte {mode_b}")
    mode = _MODE_NAME[mode_b]
    try:
        cfg = ModelConfig(l, nh, dh, d)
    except Exception as exc:
        raise FormatError(f"{path}: invalid header ({exc})") from exc
    rest = (dh - 2 * elite_r) * nh
    kv = nh * dh
    factors = []
    try:
        if mode == "jlrd":
            (d_ckv,) = r.unpack("<I")
            for _ in range(l):
                a = r.matrix(d, d_ckv)
                b = r.matrix(d_ckv, rest + kv)
                factors.append(LowRankFactors(
                    mode="jlrd", elite_r=elite_r, n_heads=nh, head_dim=dh,
                    a_kv=a, b_joint=b,
                ))
        else:
            d_ck, d_cv = r.unpack("<II")
            for _ in range(l):
                a_k = r.matrix(d, d_ck)
                b_k = r.matrix(d_ck, rest)
                a_v = r.matrix(d, d_cv)
                b_v = r.matrix(d_cv, kv)
                factors.append(LowRankFactors(
                    mode="slrd", elite_r=elite_r, n_heads=nh, head_dim=dh,
                    a_k=a_k, b_k_sep=b_k, a_v=a_v, b_v_sep=b_v,
                ))
    except ValueError as exc:
        raise FormatError(f"{path}: malformed factor payload ({exc})") from exc
    r.done()
    return cfg, tuple(factors)


def write_calibration(path, calib: CalibrationBatch) -> None:
    """Header: magic, u16 version, u32 d, u32 sequence count; per sequence a
    u32 length followed by the (T, d) embedding rows."""
    d = calib.sequences[0].shape[1]
    parts = [struct.pack("<4sHII", CALIB_MAGIC, FORMAT_VERSION, d, len(calib.sequences))]
    for seq in calib.sequences:
        if seq.shape[1] != d:
            raise FormatError("sequences must share the embedding width")
        parts.append(struct.pack("<I", seq.shape[0]))
        parts.append(_mat_bytes(seq))
    Path(path).write_bytes(b"".join(parts))


def read_calibration(path) -> CalibrationBatch:
    r = _Reader(_read_file(path), path)
    magic, version, d, count = r.unpack("<4sHII")
    if magic != CALIB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    seqs = []
    for _ in range(count):
        (t,) = r.unpack("<I")
        seqs.append(r.matrix(t, d))
    r.done()
    try:
        return CalibrationBatch(sequences=tuple(seqs))
    except Exception as exc:
        raise FormatError(f"{path}: invalid calibration payload ({exc})") from exc


def dump_json_line(row: dict) -> str:
    return json.dumps(row, separators=(",", ":"))


def write_jsonl(path, rows: list[dict]) -> None:
    text = "".join(dump_json_line(row) + "\n" for row in rows)
    Path(path).write_text(text, encoding="utf-8")


def read_jsonl(path) -> list[dict]:
    rows = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{i + 1}: not valid JSON ({exc})") from exc
    return rows
