"""Binary checkpoint format.

Layout: 8-byte magic, u32 format version, u32 header length, a JSON header
(sorted keys), Z as packed row bitmaps, mu_tilde and sigma2_tilde as
little-endian float64 K x D blocks, then a SHA-256 digest of everything
before it.
"""

from dataclasses import asdict
import hashlib
import json
import struct

import numpy as np

from .engine import ModelState
from .model import BinaryFeatureMatrix, GammaPriors, Hyperparams
from .variational import FactorPosterior, GammaPosterior

MAGIC = b"MEIBPCK\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sII")
_DIGEST = 32


class CheckpointError(ValueError):
    pass


def _hyper_record(h):
    rec = {"alpha": h.alpha, "sigma_x": h.sigma_x, "sigma_a": h.sigma_a,
           "hyper_inference": h.hyper_inference, "gamma_priors": None}
    if h.gamma_priors is not None:
        rec["gamma_priors"] = asdict(h.gamma_priors)
    return rec


def _hyper_from(rec):
    g = rec.get("gamma_priors")
    return Hyperparams(rec["alpha"], rec["sigma_x"], rec["sigma_a"], rec["hyper_inference"],
                       None if g is None else GammaPriors(**g))


def encode(state):
    n, k = state.z.z.shape
    d = state.n_cols
    pre = state.dataset.preprocessing
    header = {
        "format_version": VERSION,
        "n": n, "d": d, "k_max": k, "k_plus": state.k_plus,
        "hyper": _hyper_record(state.hyper),
        "gamma": None if state.gamma is None else
        {name: [g.a_tilde, g.b_tilde] for name, g in sorted(state.gamma.items())},
        "rng_state": state.rng.bit_generator.state,
        "seed": int(state.seed),
        "iteration": int(state.iteration),
        "train_ll_history": [float(v) for v in state.train_ll_history],
        "preprocessing": {"scheme": pre.scheme, "shift_applied": pre.shift_applied},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join([
        _PREFIX.pack(MAGIC, VERSION, len(head)),
        head,
        np.packbits(state.z.z.astype(bool), axis=1).tobytes(),
        np.ascontiguousarray(state.q.mu_tilde, dtype="<f8").tobytes(),
        np.ascontiguousarray(state.q.sigma2_tilde, dtype="<f8").tobytes(),
    ])
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state, path):
    data = encode(state)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def decode(data):
    """Verify and split a checkpoint into (header, z, mu_tilde, sigma2_tilde)."""
    if len(data) < _PREFIX.size + _DIGEST:
        raise CheckpointError("checkpoint truncated")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    magic, version, head_len = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {VERSION}")
    off = _PREFIX.size
    header = json.loads(body[off:off + head_len].decode("utf-8"))
    off += head_len
    n, d, k = header["n"], header["d"], header["k_max"]
    row_bytes = (k + 7) // 8
    zbits = np.frombuffer(body, np.uint8, n * row_bytes, off).reshape(n, row_bytes)
    off += n * row_bytes
    z = np.unpackbits(zbits, axis=1, count=k).astype(np.uint8)
    mu = np.frombuffer(body, "<f8", k * d, off).reshape(k, d).astype(np.float64)
    off += 8 * k * d
    sigma2 = np.frombuffer(body, "<f8", k * d, off).reshape(k, d).astype(np.float64)
    off += 8 * k * d
    if off != len(body):
        raise CheckpointError("checkpoint payload length mismatch")
    return header, z, mu, sigma2


def read_header(path):
    with open(path, "rb") as fh:
        return decode(fh.read())[0]


def load_checkpoint(path, dataset):
    """Rebuild a ModelState on ``dataset`` (raw, un-preprocessed data).

    The stored preprocessing shift is re-applied to the dataset.
    """
    with open(path, "rb") as fh:
        header, z, mu, sigma2 = decode(fh.read())
    if dataset.x.shape != (header["n"], header["d"]):
        raise CheckpointError(
            f"dataset shape {dataset.x.shape} does not match checkpoint {(header['n'], header['d'])}")
    pre = header["preprocessing"]
    if dataset.preprocessing.scheme == "none" and pre["scheme"] != "none":
        dataset = dataset.apply_shift(pre["scheme"], pre["shift_applied"])
    gamma = None
    if header["gamma"] is not None:
        gamma = {name: GammaPosterior(*ab) for name, ab in header["gamma"].items()}
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    state = ModelState(dataset, BinaryFeatureMatrix(z), FactorPosterior(mu, sigma2),
                       _hyper_from(header["hyper"]), gamma=gamma, rng=rng,
                       seed=header["seed"], iteration=header["iteration"])
    state.train_ll_history = list(header["train_ll_history"])
    return state
