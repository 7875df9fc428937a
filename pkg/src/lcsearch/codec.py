"""Vector codecs: identity, scalar, PCA, rotated product quantization and
two-level residual quantization, with asymmetric distance computation.

Codecs are trained from a spec string such as "OPQ32x8" (rotation + 32
sub-quantizers of 8 bits) or "PQ1x16+OPQ30x8" (65536-centroid coarse level,
30-byte fine level on the residual, learned rotation). When a quantizer
count does not divide the data dimension, vectors are zero-padded to the
smallest width every level divides; the rotation is learned over the padded
space and decoding truncates back. Queries are never quantized: distances
against stored codes use per-sub-quantizer lookup tables (plus an exact
coarse/fine cross term for two-level codecs).

Serialization format "LCQ1": magic, codec kind, dimension headers as
little-endian 32-bit ints, then rotation and centroid float32 payloads.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .kmeans import kmeans_train, kmeans_train_two_stage
from .pq import ProductQuantizer, opq_train, pq_train, pack_codes, unpack_codes
from .serial import FormatError, Reader, Writer

MAGIC = b"LCQ1"

KIND_NONE = 0
KIND_SCALAR = 1
KIND_PCA = 2
KIND_PQ = 3
KIND_TWO_LEVEL = 4


class CodecError(ValueError):
    pass


def _as_rows(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float32)
    return x[None, :] if x.ndim == 1 else x


@dataclass
class AdcTable:
    """Per-query lookup tables of partial squared distances.

    `tables` holds one (m, 2**bits) array per quantizer level. For two-level
    codecs the summed lookups are completed by an exact cross term between
    the coarse and fine reconstructions, computed from the codes.
    """

    codec: "Codec"
    tables: list[np.ndarray]
    query: np.ndarray

    def distance(self, codes: np.ndarray) -> np.ndarray:
        return self.codec._adc_distance(self, np.asarray(codes, dtype=np.uint8))


class Codec:
    """Interface: train once, then encode/decode/ADC are pure."""

    spec = "?"
    dim = 0

    @property
    def code_bytes(self) -> int:
        raise NotImplementedError

    def encode(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode(self, codes: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adc_table(self, q: np.ndarray) -> AdcTable:
        """Default ADC evaluates against decoded vectors (exact by construction)."""
        q = np.ascontiguousarray(q, dtype=np.float32)
        return AdcTable(self, [], q)

    def _adc_distance(self, table: AdcTable, codes: np.ndarray) -> np.ndarray:
        rec = self.decode(codes)
        diff = rec - table.query[None, :]
        return (diff * diff).sum(axis=1)

    def _payload(self, w: Writer) -> None:
        raise NotImplementedError

    def to_bytes(self) -> bytes:
        w = Writer()
        w.magic(MAGIC)
        w.u32(self._KIND)
        w.text(self.spec)
        w.u32(self.dim)
        self._payload(w)
        return w.getvalue()


class IdentityCodec(Codec):
    """Stores raw float32 components; the 'none' baseline."""

    _KIND = KIND_NONE

    def __init__(self, dim: int, spec: str = "none") -> None:
        self.dim = dim
        self.spec = spec

    @property
    def code_bytes(self) -> int:
        return 4 * self.dim

    def encode(self, x: np.ndarray) -> np.ndarray:
        return _as_rows(x).view(np.uint8).reshape(-1, self.code_bytes).copy()

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.ascontiguousarray(codes, dtype=np.uint8)
        if codes.ndim == 1:
            codes = codes[None, :]
        return codes.view(np.float32).reshape(-1, self.dim).copy()

    def _payload(self, w: Writer) -> None:
        pass


class ScalarCodec(Codec):
    """Per-dimension uniform 8-bit quantizer over the learn-set min/max."""

    _KIND = KIND_SCALAR

    def __init__(self, mins: np.ndarray, maxs: np.ndarray, spec: str = "scalar") -> None:
        self.mins = np.ascontiguousarray(mins, dtype=np.float32)
        self.maxs = np.ascontiguousarray(maxs, dtype=np.float32)
        self.dim = self.mins.shape[0]
        self.spec = spec
        scale = (self.maxs - self.mins) / 255.0
        self._scale = scale.astype(np.float32)

    @classmethod
    def train(cls, learn: np.ndarray, spec: str = "scalar") -> "ScalarCodec":
        learn = _as_rows(learn)
        return cls(learn.min(axis=0), learn.max(axis=0), spec)

    @property
    def code_bytes(self) -> int:
        return self.dim

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = _as_rows(x)
        scale = np.where(self._scale > 0, self._scale, 1.0)
        q = np.rint((x - self.mins) / scale)
        return np.clip(q, 0, 255).astype(np.uint8)

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.ascontiguousarray(codes, dtype=np.uint8)
        if codes.ndim == 1:
            codes = codes[None, :]
        return self.mins + codes.astype(np.float32) * self._scale

    def _payload(self, w: Writer) -> None:
        w.array(self.mins, np.float32)
        w.array(self.maxs, np.float32)


class PcaCodec(Codec):
    """Projection onto the top principal components, stored as float32."""

    _KIND = KIND_PCA

    def __init__(self, mean: np.ndarray, components: np.ndarray, spec: str) -> None:
        self.mean = np.ascontiguousarray(mean, dtype=np.float32)
        self.components = np.ascontiguousarray(components, dtype=np.float32)  # (out, dim)
        self.dim = self.mean.shape[0]
        self.out_dim = self.components.shape[0]
        self.spec = spec

    @classmethod
    def train(cls, learn: np.ndarray, out_dim: int, spec: str | None = None) -> "PcaCodec":
        learn = _as_rows(learn)
        mean = learn.mean(axis=0)
        _, _, vt = np.linalg.svd(learn - mean, full_matrices=False)
        return cls(mean, vt[:out_dim], spec or f"PCA{out_dim}")

    @property
    def code_bytes(self) -> int:
        return 4 * self.out_dim

    def encode(self, x: np.ndarray) -> np.ndarray:
        y = (_as_rows(x) - self.mean) @ self.components.T
        return y.astype(np.float32).view(np.uint8).reshape(-1, self.code_bytes).copy()

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.ascontiguousarray(codes, dtype=np.uint8)
        if codes.ndim == 1:
            codes = codes[None, :]
        y = codes.view(np.float32).reshape(-1, self.out_dim)
        return self.mean + y @ self.components

    def _payload(self, w: Writer) -> None:
        w.u32(self.out_dim)
        w.array(self.mean, np.float32)
        w.array(self.components, np.float32)


def _pad(x: np.ndarray, pad_dim: int) -> np.ndarray:
    if x.shape[1] == pad_dim:
        return x
    out = np.zeros((x.shape[0], pad_dim), dtype=np.float32)
    out[:, :x.shape[1]] = x
    return out


class PqCodec(Codec):
    """Optional rotation followed by a product quantizer (PQmxb / OPQmxb)."""

    _KIND = KIND_PQ

    def __init__(self, dim: int, rotation: np.ndarray | None,
                 pq: ProductQuantizer, spec: str) -> None:
        self.dim = dim
        self.rotation = None if rotation is None else \
            np.ascontiguousarray(rotation, dtype=np.float32)
        self.pq = pq
        self.spec = spec

    @property
    def pad_dim(self) -> int:
        return self.pq.dim

    @property
    def code_bytes(self) -> int:
        return self.pq.code_bytes

    def rotate(self, x: np.ndarray) -> np.ndarray:
        z = _pad(_as_rows(x), self.pad_dim)
        return z if self.rotation is None else z @ self.rotation

    def unrotate(self, z: np.ndarray) -> np.ndarray:
        x = z if self.rotation is None else z @ self.rotation.T
        return np.ascontiguousarray(x[:, :self.dim])

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.pq.encode(self.rotate(x))

    def decode(self, codes: np.ndarray) -> np.ndarray:
        return self.unrotate(self.pq.decode(codes))

    def adc_table(self, q: np.ndarray) -> AdcTable:
        z = self.rotate(q)[0]
        cb = self.pq.codebooks
        zr = z.reshape(self.pq.m, self.pq.sub_dim)
        # tab[j, f] = ||z_j - cb[j, f]||^2
        tab = ((cb - zr[:, None, :]) ** 2).sum(axis=2).astype(np.float32)
        return AdcTable(self, [tab], z)

    def _adc_distance(self, table: AdcTable, codes: np.ndarray) -> np.ndarray:
        ids = unpack_codes(codes, self.pq.m, self.pq.bits)
        tab = table.tables[0]
        return tab[np.arange(self.pq.m), ids].sum(axis=1)

    def _payload(self, w: Writer) -> None:
        w.u32(self.pad_dim)
        w.u32(0 if self.rotation is None else 1)
        w.u32(self.pq.m)
        w.u32(self.pq.bits)
        if self.rotation is not None:
            w.array(self.rotation, np.float32)
        w.array(self.pq.codebooks, np.float32)


class TwoLevelCodec(Codec):
    """Rotation, coarse quantizer, then a full-width fine quantizer on the residual."""

    _KIND = KIND_TWO_LEVEL

    def __init__(self, dim: int, rotation: np.ndarray | None,
                 coarse: ProductQuantizer, fine: ProductQuantizer, spec: str) -> None:
        if coarse.dim != fine.dim:
            raise CodecError("coarse and fine quantizers must cover the same width")
        self.dim = dim
        self.rotation = None if rotation is None else \
            np.ascontiguousarray(rotation, dtype=np.float32)
        self.coarse = coarse
        self.fine = fine
        self.spec = spec

    @property
    def pad_dim(self) -> int:
        return self.coarse.dim

    @property
    def coarse_bytes(self) -> int:
        return self.coarse.code_bytes

    @property
    def code_bytes(self) -> int:
        return self.coarse.code_bytes + self.fine.code_bytes

    def rotate(self, x: np.ndarray) -> np.ndarray:
        z = _pad(_as_rows(x), self.pad_dim)
        return z if self.rotation is None else z @ self.rotation

    def unrotate(self, z: np.ndarray) -> np.ndarray:
        x = z if self.rotation is None else z @ self.rotation.T
        return np.ascontiguousarray(x[:, :self.dim])

    def split_ids(self, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        codes = np.asarray(codes, dtype=np.uint8)
        if codes.ndim == 1:
            codes = codes[None, :]
        cb = self.coarse.code_bytes
        cids = unpack_codes(np.ascontiguousarray(codes[:, :cb]),
                            self.coarse.m, self.coarse.bits)
        fids = unpack_codes(np.ascontiguousarray(codes[:, cb:]),
                            self.fine.m, self.fine.bits)
        return cids, fids

    def encode(self, x: np.ndarray) -> np.ndarray:
        z = self.rotate(x)
        cids = self.coarse.encode_ids(z)
        resid = z - self.coarse.decode_ids(cids)
        fids = self.fine.encode_ids(resid)
        return np.concatenate([pack_codes(cids, self.coarse.bits),
                               pack_codes(fids, self.fine.bits)], axis=1)

    def decode_rotated(self, codes: np.ndarray) -> np.ndarray:
        cids, fids = self.split_ids(codes)
        return self.coarse.decode_ids(cids) + self.fine.decode_ids(fids)

    def decode_coarse(self, codes: np.ndarray) -> np.ndarray:
        cids, _ = self.split_ids(codes)
        return self.unrotate(self.coarse.decode_ids(cids))

    def decode(self, codes: np.ndarray) -> np.ndarray:
        return self.unrotate(self.decode_rotated(codes))

    def adc_table(self, q: np.ndarray) -> AdcTable:
        z = self.rotate(q)[0]
        zc = z.reshape(self.coarse.m, self.coarse.sub_dim)
        ctab = ((self.coarse.codebooks - zc[:, None, :]) ** 2).sum(axis=2)
        zf = z.reshape(self.fine.m, self.fine.sub_dim)
        fcb = self.fine.codebooks
        # ||F||^2 - 2<z_j, F>; the coarse/fine cross term is added per code pair
        ftab = (fcb ** 2).sum(axis=2) - 2.0 * np.einsum("mkd,md->mk", fcb, zf)
        return AdcTable(self, [ctab.astype(np.float32), ftab.astype(np.float32)], z)

    def _adc_distance(self, table: AdcTable, codes: np.ndarray) -> np.ndarray:
        cids, fids = self.split_ids(codes)
        ctab, ftab = table.tables
        d = ctab[np.arange(self.coarse.m), cids].sum(axis=1)
        d += ftab[np.arange(self.fine.m), fids].sum(axis=1)
        crec = self.coarse.decode_ids(cids)
        frec = self.fine.decode_ids(fids)
        d += 2.0 * np.einsum("bd,bd->b", crec, frec)
        return d

    def _payload(self, w: Writer) -> None:
        w.u32(self.pad_dim)
        w.u32(0 if self.rotation is None else 1)
        if self.rotation is not None:
            w.array(self.rotation, np.float32)
        for pq in (self.coarse, self.fine):
            w.u32(pq.m)
            w.u32(pq.bits)
            w.array(pq.codebooks, np.float32)


_PQ_RE = re.compile(r"^(O?PQ)(\d+)x(\d+)$")


@dataclass
class CodecSpec:
    """Parsed codec spec string."""

    name: str
    kind: int
    coarse: tuple[int, int] | None = None  # (m, bits)
    fine: tuple[int, int] | None = None
    rotate: bool = False
    pca_dim: int = 0

    @property
    def pad_multiple(self) -> int:
        levels = [t for t in (self.coarse, self.fine) if t is not None]
        mult = 1
        for m, _ in levels:
            mult = mult * m // math.gcd(mult, m)
        return mult


def parse_codec_spec(spec: str) -> CodecSpec:
    """Parse 'none', 'scalar', 'PCA8', 'PQ16x8', 'OPQ32x8' or 'PQ1x16+OPQ30x8'."""
    s = spec.strip()
    if s == "none":
        return CodecSpec(s, KIND_NONE)
    if s == "scalar":
        return CodecSpec(s, KIND_SCALAR)
    if s.upper().startswith("PCA"):
        try:
            out = int(s[3:])
        except ValueError:
            raise CodecError(f"bad PCA spec {spec!r}") from None
        return CodecSpec(s, KIND_PCA, pca_dim=out)
    parts = s.split("+")
    if len(parts) == 1:
        m_ = _PQ_RE.match(parts[0])
        if not m_:
            raise CodecError(f"unrecognized codec spec {spec!r}")
        return CodecSpec(s, KIND_PQ, fine=(int(m_.group(2)), int(m_.group(3))),
                         rotate=m_.group(1) == "OPQ")
    if len(parts) == 2:
        c_ = _PQ_RE.match(parts[0])
        f_ = _PQ_RE.match(parts[1])
        if not c_ or not f_:
            raise CodecError(f"unrecognized codec spec {spec!r}")
        if c_.group(1) == "OPQ":
            raise CodecError("coarse level cannot carry the rotation marker")
        if int(c_.group(2)) > 2:
            raise CodecError("coarse level supports at most 2 sub-quantizers")
        return CodecSpec(s, KIND_TWO_LEVEL,
                         coarse=(int(c_.group(2)), int(c_.group(3))),
                         fine=(int(f_.group(2)), int(f_.group(3))),
                         rotate=f_.group(1) == "OPQ")
    raise CodecError(f"unrecognized codec spec {spec!r}")


def _pad_dim_for(dim: int, mult: int) -> int:
    return ((dim + mult - 1) // mult) * mult


def train_codec(spec: str, learn: np.ndarray, seed: int = 0,
                opq_iters: int = 20, kmeans_iters: int = 25,
                coarse_exact: bool = False) -> Codec:
    """Train the codec described by `spec` on the learn set."""
    learn = _as_rows(learn)
    dim = learn.shape[1]
    ps = parse_codec_spec(spec)
    if ps.kind == KIND_NONE:
        return IdentityCodec(dim, ps.name)
    if ps.kind == KIND_SCALAR:
        return ScalarCodec.train(learn, ps.name)
    if ps.kind == KIND_PCA:
        if ps.pca_dim > dim:
            raise CodecError(f"PCA dim {ps.pca_dim} exceeds data dim {dim}")
        return PcaCodec.train(learn, ps.pca_dim, ps.name)
    pad_dim = _pad_dim_for(dim, ps.pad_multiple)
    padded = _pad(learn, pad_dim)
    if ps.kind == KIND_PQ:
        m, bits = ps.fine
        if ps.rotate:
            rotation, pq = opq_train(padded, m, bits, outer_iters=opq_iters,
                                     iters=kmeans_iters, seed=seed)
        else:
            rotation, pq = None, pq_train(padded, m, bits, iters=kmeans_iters, seed=seed)
        return PqCodec(dim, rotation, pq, ps.name)
    # two-level: rotation learned for the fine shape, coarse trained in the
    # rotated space, fine trained on the coarse residuals
    fm, fbits = ps.fine
    cm, cbits = ps.coarse
    if ps.rotate:
        rotation, _ = opq_train(padded, fm, fbits, outer_iters=opq_iters,
                                iters=kmeans_iters, seed=seed)
        z = padded @ rotation
    else:
        rotation, z = None, padded
    coarse = _train_coarse(z, cm, cbits, kmeans_iters, seed + 101, coarse_exact)
    resid = z - coarse.decode_ids(coarse.encode_ids(z))
    fine = pq_train(resid, fm, fbits, iters=kmeans_iters, seed=seed + 202)
    return TwoLevelCodec(dim, rotation, coarse, fine, ps.name)


def _train_coarse(z: np.ndarray, m: int, bits: int, iters: int, seed: int,
                  exact: bool) -> ProductQuantizer:
    """Coarse quantizer; 2^bits >= 4096 centroids train two-stage unless forced exact."""
    k = 1 << bits
    if z.shape[0] < k:
        raise CodecError(f"{z.shape[0]} learn vectors cannot train {k} coarse centroids")
    if z.shape[1] % m != 0:
        raise CodecError(f"padded dim {z.shape[1]} not divisible by coarse m={m}")
    sub = z.shape[1] // m
    trainer = kmeans_train if (exact or k < 4096) else kmeans_train_two_stage
    books = np.empty((m, k, sub), dtype=np.float32)
    for j in range(m):
        cb = trainer(np.ascontiguousarray(z[:, j * sub:(j + 1) * sub]), k,
                     iters=iters, seed=seed + j)
        books[j] = cb.centroids
    return ProductQuantizer(books, bits)


def codec_from_bytes(raw: bytes) -> Codec:
    r = Reader(raw)
    r.magic(MAGIC)
    kind = r.u32()
    spec = r.text()
    dim = r.u32()
    if kind == KIND_NONE:
        return IdentityCodec(dim, spec)
    if kind == KIND_SCALAR:
        mins = r.array((dim,), np.float32)
        maxs = r.array((dim,), np.float32)
        return ScalarCodec(mins, maxs, spec)
    if kind == KIND_PCA:
        out = r.u32()
        mean = r.array((dim,), np.float32)
        comps = r.array((out, dim), np.float32)
        return PcaCodec(mean, comps, spec)
    if kind == KIND_PQ:
        pad_dim = r.u32()
        has_rot = r.u32()
        m = r.u32()
        bits = r.u32()
        rot = r.array((pad_dim, pad_dim), np.float32) if has_rot else None
        books = r.array((m, 1 << bits, pad_dim // m), np.float32)
        return PqCodec(dim, rot, ProductQuantizer(books, bits), spec)
    if kind == KIND_TWO_LEVEL:
        pad_dim = r.u32()
        has_rot = r.u32()
        rot = r.array((pad_dim, pad_dim), np.float32) if has_rot else None
        pqs = []
        for _ in range(2):
            m = r.u32()
            bits = r.u32()
            books = r.array((m, 1 << bits, pad_dim // m), np.float32)
            pqs.append(ProductQuantizer(books, bits))
        return TwoLevelCodec(dim, rot, pqs[0], pqs[1], spec)
    raise FormatError(f"unknown codec kind {kind}")


def save_codec(codec: Codec, path) -> None:
    with open(path, "wb") as f:
        f.write(codec.to_bytes())


def load_codec(path) -> Codec:
    with open(path, "rb") as f:
        return codec_from_bytes(f.read())


def encode_blocked(codec: Codec, x: np.ndarray, block: int = 65536) -> np.ndarray:
    """Encode a large matrix in row blocks."""
    x = _as_rows(x)
    out = np.empty((x.shape[0], codec.code_bytes), dtype=np.uint8)
    for lo in range(0, x.shape[0], block):
        out[lo:lo + block] = codec.encode(x[lo:lo + block])
    return out


def decode_blocked(codec: Codec, codes: np.ndarray, block: int = 65536) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint8)
    out = np.empty((codes.shape[0], codec.dim), dtype=np.float32)
    for lo in range(0, codes.shape[0], block):
        out[lo:lo + block] = codec.decode(codes[lo:lo + block])
    return out
