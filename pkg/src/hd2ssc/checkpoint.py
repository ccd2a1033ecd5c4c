"""Checkpoint container for named parameters.

Layout (little endian):
    magic    4 bytes  b"HD2C"
    version  u16      currently 1
    cfg_len  u32      length of the UTF-8 config text that follows
    config   bytes    ``ModelConfig.to_text()`` snapshot
    ncls     u16      number of output classes
    count    u32      number of parameters
    per parameter:
        name_len u16, name (UTF-8), rank u8, dims rank x u32,
        values   prod(dims) x f64
"""
import struct

import numpy as np

from .dataio.config import parse_config_text
from .errors import CheckpointError, HD2Error

MAGIC = b"HD2C"
VERSION = 1


def encode_checkpoint(model):
    cfg_text = model.cfg.to_text().encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(cfg_text)), cfg_text,
             struct.pack("<HI", model.num_classes, len(model.parameters()))]
    for p in model.parameters():
        name = p.name.encode()
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(p.data.astype("<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def decode_checkpoint(buf):
    """Return (config, num_classes, {name: array})."""
    r = _Reader(bytes(buf))
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, cfg_len = r.unpack("<HI", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        cfg = parse_config_text(r.take(cfg_len, "config").decode())
    except (UnicodeDecodeError, HD2Error) as e:
        raise CheckpointError(f"checkpoint config unreadable: {e}") from e
    ncls, count = r.unpack("<HI", "parameter count")
    state = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode(errors="replace")
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        n = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(r.take(8 * n, name), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(r.buf):
        raise CheckpointError("trailing bytes after the last parameter")
    return cfg, ncls, state


def save_checkpoint(model, path):
    with open(path, "wb") as f:
        f.write(encode_checkpoint(model))


def load_checkpoint(path):
    """Rebuild the model stored at ``path``, checking every parameter shape."""
    from .pipeline import HD2SSC
    with open(path, "rb") as f:
        cfg, ncls, state = decode_checkpoint(f.read())
    model = HD2SSC(cfg, ncls)
    params = model.named_parameters()
    if set(params) != set(state):
        missing = sorted(set(params) ^ set(state))
        raise CheckpointError(f"checkpoint parameters do not match the model: {missing[:5]}")
    for name, p in params.items():
        if p.shape != state[name].shape:
            raise CheckpointError(f"{name}: checkpoint shape {state[name].shape}, model expects {p.shape}")
        p.data[...] = state[name]
    return model
