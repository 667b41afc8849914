"""Lossless storage of task masks.

T binary task masks are packed into one T-bit integer symbol per weight
(task 1 in the most significant bit), the symbol stream is compressed
with a canonical Huffman code, and the result is serialized as a ``.wsnt``
bundle:

    magic "WSNT" | version u8 | T u8
    layer count u32 | numel u64 per layer
    codebook entries u16 | (symbol u64, code length u8) per entry
    payload bit length u64 | payload bytes | CRC32(payload) u32

All integers are little-endian.
"""
import heapq
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, IntegrityError
from .masks import TaskMask

MAGIC = b"WSNT"
VERSION = 1
MAX_TASKS = 64
# longest code handled by the table decoder; longer codes fall back to a bit loop
_TABLE_BITS = 20


def pack_symbols(masks):
    """One integer per weight: sum over tasks of m_t * 2**(T - t)."""
    T = len(masks)
    if not 1 <= T <= MAX_TASKS:
        raise ConfigError(f"can pack between 1 and {MAX_TASKS} masks, got {T}")
    shapes = [np.shape(m) for m in masks[0].layers]
    symbols = None
    for t, mask in enumerate(masks):
        if [np.shape(m) for m in mask.layers] != shapes:
            raise DimensionError(f"mask {t + 1} differs in shape from mask 1")
        flat = np.concatenate([np.asarray(m, dtype=bool).ravel() for m in mask.layers]).astype(np.uint64)
        if symbols is None:
            symbols = np.zeros(flat.size, dtype=np.uint64)
        symbols |= flat << np.uint64(T - 1 - t)
    return symbols


def unpack_symbols(symbols, num_tasks, shapes, capacity=100.0):
    """Inverse of :func:`pack_symbols`."""
    symbols = np.asarray(symbols, dtype=np.uint64)
    sizes = [int(np.prod(s)) for s in shapes]
    if sum(sizes) != symbols.size:
        raise DimensionError(f"{symbols.size} symbols cannot fill layers of sizes {sizes}")
    bounds = np.cumsum([0] + sizes)
    masks = []
    for t in range(num_tasks):
        bits = ((symbols >> np.uint64(num_tasks - 1 - t)) & np.uint64(1)).astype(bool)
        layers = [bits[bounds[i] : bounds[i + 1]].reshape(shapes[i]) for i in range(len(shapes))]
        masks.append(TaskMask(layers, capacity))
    return masks


def huffman_code_lengths(freqs):
    """Huffman code length per symbol from a ``{symbol: count}`` map.

    A lone symbol gets a 1-bit code.  Ties are broken by symbol order, so
    the result is deterministic.
    """
    items = sorted((int(s), int(c)) for s, c in freqs.items() if c > 0)
    if not items:
        return {}
    if len(items) == 1:
        return {items[0][0]: 1}
    heap = [(count, order, [sym]) for order, (sym, count) in enumerate(items)]
    heapq.heapify(heap)
    depth = dict.fromkeys((s for s, _ in items), 0)
    order = len(heap)
    while len(heap) > 1:
        c1, _, s1 = heapq.heappop(heap)
        c2, _, s2 = heapq.heappop(heap)
        for s in s1:
            depth[s] += 1
        for s in s2:
            depth[s] += 1
        heapq.heappush(heap, (c1 + c2, order, s1 + s2))
        order += 1
    return depth


def canonical_codes(lengths):
    """``{symbol: (code, length)}`` for canonical Huffman code lengths."""
    codes = {}
    code = 0
    prev = 0
    for sym, length in sorted(lengths.items(), key=lambda kv: (kv[1], kv[0])):
        code <<= length - prev
        codes[sym] = (code, length)
        code += 1
        prev = length
    return codes


@dataclass
class EncodedTicketBundle:
    num_tasks: int
    code_lengths: dict
    payload: bytes
    payload_bits: int
    layer_numels: list
    checksum: int

    @property
    def symbol_width(self):
        return self.num_tasks

    @property
    def n_symbols(self):
        return int(sum(self.layer_numels))

    @property
    def codebook(self):
        """Symbol to code bit-string."""
        return {s: format(c, f"0{l}b") for s, (c, l) in canonical_codes(self.code_lengths).items()}

    def to_bytes(self):
        if len(self.code_lengths) > 0xFFFF:
            raise ConfigError("too many distinct symbols for the bundle format")
        parts = [MAGIC, struct.pack("<BB", VERSION, self.num_tasks)]
        parts.append(struct.pack("<I", len(self.layer_numels)))
        parts.append(struct.pack(f"<{len(self.layer_numels)}Q", *self.layer_numels))
        parts.append(struct.pack("<H", len(self.code_lengths)))
        for sym, length in sorted(self.code_lengths.items()):
            parts.append(struct.pack("<QB", sym, length))
        parts.append(struct.pack("<Q", self.payload_bits))
        parts.append(self.payload)
        parts.append(struct.pack("<I", self.checksum))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data):
        reader = _Reader(data)
        if reader.take(4) != MAGIC:
            raise IntegrityError("bad magic, not a WSNT bundle")
        version, num_tasks = reader.unpack("<BB")
        if version != VERSION:
            raise IntegrityError(f"unsupported bundle version {version}")
        (n_layers,) = reader.unpack("<I")
        numels = list(reader.unpack(f"<{n_layers}Q"))
        (n_entries,) = reader.unpack("<H")
        lengths = {}
        for _ in range(n_entries):
            sym, length = reader.unpack("<QB")
            lengths[sym] = length
        (nbits,) = reader.unpack("<Q")
        payload = reader.take((nbits + 7) // 8)
        (checksum,) = reader.unpack("<I")
        if reader.pos != len(data):
            raise IntegrityError(f"{len(data) - reader.pos} trailing bytes after bundle")
        return cls(num_tasks, lengths, payload, nbits, numels, checksum)


class _Reader:
    def __init__(self, data):
        self.data = bytes(data)
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise IntegrityError(f"bundle truncated at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def huffman_encode(symbols, num_tasks=None, layer_numels=None):
    """Compress a symbol stream into an :class:`EncodedTicketBundle`."""
    symbols = np.asarray(symbols, dtype=np.uint64).ravel()
    if symbols.size == 0:
        raise ConfigError("cannot encode an empty symbol stream")
    if num_tasks is None:
        num_tasks = max(1, int(symbols.max()).bit_length())
    if not 1 <= num_tasks <= MAX_TASKS:
        raise ConfigError(f"symbol width must be in 1..{MAX_TASKS}")
    if layer_numels is None:
        layer_numels = [symbols.size]
    if sum(layer_numels) != symbols.size:
        raise DimensionError("layer sizes do not add up to the symbol count")
    uniq, inverse, counts = np.unique(symbols, return_inverse=True, return_counts=True)
    lengths = huffman_code_lengths(dict(zip(uniq.tolist(), counts.tolist())))
    codes = canonical_codes(lengths)
    code_of = np.array([codes[s][0] for s in uniq.tolist()], dtype=np.uint64)
    len_of = np.array([codes[s][1] for s in uniq.tolist()], dtype=np.int64)
    sym_code = code_of[inverse]
    sym_len = len_of[inverse]
    nbits = int(sym_len.sum())
    starts = np.cumsum(sym_len) - sym_len
    within = np.arange(nbits, dtype=np.int64) - np.repeat(starts, sym_len)
    shift = (np.repeat(sym_len, sym_len) - 1 - within).astype(np.uint64)
    bits = ((np.repeat(sym_code, sym_len) >> shift) & np.uint64(1)).astype(np.uint8)
    payload = np.packbits(bits).tobytes()
    return EncodedTicketBundle(
        num_tasks=int(num_tasks),
        code_lengths=lengths,
        payload=payload,
        payload_bits=nbits,
        layer_numels=[int(n) for n in layer_numels],
        checksum=zlib.crc32(payload),
    )


def huffman_decode(bundle):
    """Recover the exact symbol stream; raises IntegrityError on any corruption."""
    if len(bundle.payload) != (bundle.payload_bits + 7) // 8:
        raise IntegrityError("payload length does not match its declared bit count")
    if zlib.crc32(bundle.payload) != bundle.checksum:
        raise IntegrityError("payload checksum mismatch")
    if not bundle.code_lengths:
        raise IntegrityError("empty codebook")
    n = bundle.n_symbols
    nbits = bundle.payload_bits
    bits = np.unpackbits(np.frombuffer(bundle.payload, dtype=np.uint8))[:nbits]
    codes = canonical_codes(bundle.code_lengths)
    max_len = max(l for _, l in codes.values())
    if max_len <= _TABLE_BITS:
        return _decode_table(bits, n, codes, max_len)
    return _decode_loop(bits, n, codes)


def _decode_table(bits, n, codes, max_len):
    nbits = bits.size
    syms = np.array(sorted(codes), dtype=np.uint64)
    table_sym = np.full(1 << max_len, -1, dtype=np.int64)
    table_len = np.zeros(1 << max_len, dtype=np.int64)
    for idx, sym in enumerate(sorted(codes)):
        code, length = codes[sym]
        lo, hi = code << (max_len - length), (code + 1) << (max_len - length)
        table_sym[lo:hi] = idx
        table_len[lo:hi] = length
    padded = np.concatenate([bits, np.zeros(max_len, dtype=np.uint8)]).astype(np.int64)
    window = np.zeros(nbits, dtype=np.int64)
    for j in range(max_len):
        window = (window << 1) | padded[j : j + nbits]
    step = table_len[window]
    end, err = nbits, nbits + 1
    nxt = np.arange(nbits, dtype=np.int64) + step
    nxt[(step == 0) | (nxt > nbits)] = err
    jump = np.concatenate([nxt, [err, err]])
    # position of the i-th code = jump applied i times to 0, via binary doubling
    pos = np.zeros(n, dtype=np.int64)
    index = np.arange(n)
    k = 0
    while (1 << k) < n:
        sel = ((index >> k) & 1).astype(bool)
        pos[sel] = jump[pos[sel]]
        jump = jump[jump]
        k += 1
    if (pos >= end).any():
        raise IntegrityError("payload ends before all symbols were decoded")
    last = pos[-1]
    if last + step[last] != nbits:
        raise IntegrityError("payload has undecoded trailing bits")
    return syms[table_sym[window[pos]]]


def _decode_loop(bits, n, codes):
    lookup = {(length, code): sym for sym, (code, length) in codes.items()}
    max_len = max(l for l, _ in lookup)
    out = np.empty(n, dtype=np.uint64)
    code = length = 0
    count = 0
    for b in bits.tolist():
        code = (code << 1) | b
        length += 1
        sym = lookup.get((length, code))
        if sym is not None:
            if count == n:
                raise IntegrityError("payload has undecoded trailing bits")
            out[count] = sym
            count += 1
            code = length = 0
        elif length > max_len:
            raise IntegrityError("invalid code in payload")
    if count != n or length:
        raise IntegrityError("payload ends before all symbols were decoded")
    return out


def encode_masks(masks):
    symbols = pack_symbols(masks)
    numels = [int(np.size(m)) for m in masks[0].layers]
    return huffman_encode(symbols, num_tasks=len(masks), layer_numels=numels)


def decode_masks(bundle, shapes=None, capacity=100.0):
    """Task masks from a bundle; layers are flat unless ``shapes`` is given."""
    symbols = huffman_decode(bundle)
    if shapes is None:
        shapes = [(n,) for n in bundle.layer_numels]
    if [int(np.prod(s)) for s in shapes] != list(bundle.layer_numels):
        raise DimensionError("shapes do not match the bundle's layer table")
    return unpack_symbols(symbols, bundle.num_tasks, [tuple(s) for s in shapes], capacity)


def write_bundle(path, bundle):
    """Atomically write a bundle file."""
    data = bundle.to_bytes()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".wsnt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(data)


def read_bundle(path):
    with open(path, "rb") as fh:
        return EncodedTicketBundle.from_bytes(fh.read())


@dataclass
class CapacityReport:
    sparsity: float
    compression_rate: float
    num_tasks: int
    cap_formula: float
    cap_measured: float
    payload_bits: int = 0
    bundle_bits: int = 0


def capacity_formula(sparsity, compression_rate, num_tasks):
    """(1 - S) + (1 - alpha) * T / 32: weight density plus compressed-mask cost."""
    return (1.0 - sparsity) + (1.0 - compression_rate) * num_tasks / 32.0


def capacity(masks, bundle=None, numel=None):
    """Capacity of the union of ``masks`` plus their compressed encoding.

    ``compression_rate`` is measured as 1 - payload_bits / (T * numel).
    ``cap_measured`` charges the whole serialized bundle (header, codebook,
    payload, checksum) against 32-bit weights.
    """
    T = len(masks)
    if T == 0:
        return CapacityReport(1.0, 0.0, 0, 0.0, 0.0)
    if bundle is None:
        bundle = encode_masks(masks)
    numel = numel or masks[0].numel
    used = np.zeros(numel, dtype=bool)
    for m in masks:
        used |= m.flat().astype(bool)
    sparsity = 1.0 - np.count_nonzero(used) / numel
    alpha = 1.0 - bundle.payload_bits / (T * numel)
    bundle_bits = 8 * len(bundle.to_bytes())
    return CapacityReport(
        sparsity=float(sparsity),
        compression_rate=float(alpha),
        num_tasks=T,
        cap_formula=capacity_formula(sparsity, alpha, T),
        cap_measured=float((1.0 - sparsity) + bundle_bits / (32.0 * numel)),
        payload_bits=bundle.payload_bits,
        bundle_bits=bundle_bits,
    )
