"""File formats: MNM1 array containers, checkpoints, datasets, configs, CSV and PNG."""
from __future__ import annotations

import csv
import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .fixed_point import SolverConfig
from .mri import KSpaceData, MeasurementModel, Sample
from .operators import ScoreNetwork

MAGIC = b"MNM1"
CKPT_MAGIC = b"MNMC"
DTYPES = {0: np.dtype("<f8")}


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class UnknownDTypeError(ContainerError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- containers

def encode_array(a):
    """Serialize a float64 array (complex arrays are stacked real/imag on a new axis 0)."""
    a = np.asarray(a)
    if np.iscomplexobj(a):
        a = np.stack([a.real, a.imag])
    a = np.asarray(a, dtype="<f8", order="C")
    if a.ndim > 255:
        raise ContainerError("too many dimensions")
    head = MAGIC + struct.pack("<BB", 0, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def decode_array(buf, offset=0):
    """Parse one container from ``buf`` at ``offset``; returns ``(array, end_offset)``."""
    mv = memoryview(buf)
    if len(mv) - offset < 6:
        raise TruncatedError("container header truncated")
    if bytes(mv[offset:offset + 4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(mv[offset:offset + 4])!r}")
    code, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if code not in DTYPES:
        raise UnknownDTypeError(f"unknown dtype code {code}")
    pos = offset + 6
    if len(mv) - pos < 4 * ndim:
        raise TruncatedError("container dims truncated")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dt = DTYPES[code]
    nbytes = dt.itemsize * int(np.prod(dims, dtype=np.int64))
    if len(mv) - pos < nbytes:
        raise TruncatedError(f"payload truncated: need {nbytes} bytes, have {len(mv) - pos}")
    a = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims)
    return a.astype(np.float64), pos + nbytes


def write_array(path, a):
    Path(path).write_bytes(encode_array(a))


def read_array(path):
    buf = Path(path).read_bytes()
    a, end = decode_array(buf)
    if end != len(buf):
        raise ContainerError(f"{path}: {len(buf) - end} trailing bytes")
    return a


def stacked_to_complex(a):
    return a[0] + 1j * a[1]


# ---------------------------------------------------------------- datasets

def write_dataset(out, samples, params):
    """Write samples sharing one mask as containers plus ``manifest.json``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out / "mask.mnm", samples[0].mm.mask)
    names = []
    for i, s in enumerate(samples):
        stem = f"{i:04d}"
        write_array(out / f"phantom_{stem}.mnm", s.x_ref)
        write_array(out / f"maps_{stem}.mnm", s.mm.coil_maps)
        write_array(out / f"kspace_{stem}.mnm", s.b.samples)
        names.append(stem)
    manifest = dict(params, count=len(samples), samples=names,
                    noise_sigma=float(samples[0].mm.noise_sigma))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(path):
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise FileNotFoundError(f"{mf} not found")
    manifest = json.loads(mf.read_text())
    mask = read_array(path / "mask.mnm")
    samples = []
    for stem in manifest["samples"]:
        maps = stacked_to_complex(read_array(path / f"maps_{stem}.mnm"))
        mm = MeasurementModel(mask, maps, manifest.get("noise_sigma", 0.0))
        k = stacked_to_complex(read_array(path / f"kspace_{stem}.mnm"))
        samples.append(Sample(read_array(path / f"phantom_{stem}.mnm"), KSpaceData(k, mm.model_id), mm))
    return samples, manifest


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, model, meta=None):
    """Header (JSON, sorted keys) followed by one container per weight and bias."""
    header = {
        "variant": model.variant, "lam": model.lam, "mu": model.mu, "delta": model.delta, "m": model.m,
        "residual": model.score.residual, "n_layers": len(model.score.layers),
        "solver": dataclasses.asdict(model.solver), "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", len(hb)), hb]
    for w, b in model.score.layers:
        parts += [encode_array(w), encode_array(b)]
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path):
    from .trainer import ReconModel

    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint")
    if len(buf) < 8:
        raise TruncatedError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + n:
        raise TruncatedError(f"{path}: truncated header")
    header = json.loads(buf[8:8 + n])
    pos = 8 + n
    layers = []
    for _ in range(header["n_layers"]):
        w, pos = decode_array(buf, pos)
        b, pos = decode_array(buf, pos)
        layers.append((w, b))
    if pos != len(buf):
        raise ContainerError(f"{path}: trailing bytes")
    score = ScoreNetwork(layers, residual=header["residual"])
    model = ReconModel(score, header["lam"], header["variant"], SolverConfig(**header["solver"]),
                       header["mu"], header["delta"], header["m"])
    return model, header["meta"]


# ---------------------------------------------------------------- config

@dataclass
class DataSection:
    size: list = field(default_factory=lambda: [32, 32])
    coils: int = 4
    accel: int = 4
    count: int = 50
    sigma: float = 0.01
    seed: int = 0


@dataclass
class RobustSection:
    eps_list: list = field(default_factory=lambda: [0.0, 0.025, 0.05, 0.075, 0.1])
    steps: int = 20
    trials: int = 10
    seed: int = 0
    max_images: int = 10


@dataclass
class LemmaSection:
    configs: int = 20
    size: list = field(default_factory=lambda: [16, 16])
    lipschitz_steps: int = 200
    seed: int = 0


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    train: dict = field(default_factory=dict)
    robust: RobustSection = field(default_factory=RobustSection)
    lemmas: LemmaSection = field(default_factory=LemmaSection)

    def train_config(self, **overrides):
        from .trainer import TrainConfig

        return TrainConfig(**{**self.train, **overrides})

    def to_dict(self):
        return {
            "data": dataclasses.asdict(self.data),
            "train": dataclasses.asdict(self.train_config()) if self.train else {},
            "robust": dataclasses.asdict(self.robust),
            "lemmas": dataclasses.asdict(self.lemmas),
        }


def _strict(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(raw):
    """Build an :class:`ExperimentConfig` from a parsed mapping; unknown keys are errors."""
    from .trainer import TrainConfig

    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(raw) - {"data", "train", "robust", "lemmas"})
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    train = raw.get("train") or {}
    if not isinstance(train, dict):
        raise ConfigError("train: expected a mapping")
    solver = train.get("solver")
    if solver is not None:
        _strict(SolverConfig, solver, "train.solver")
    _strict(TrainConfig, train, "train")
    return ExperimentConfig(
        data=_strict(DataSection, raw.get("data"), "data"),
        train=dict(train),
        robust=_strict(RobustSection, raw.get("robust"), "robust"),
        lemmas=_strict(LemmaSection, raw.get("lemmas"), "lemmas"),
    )


def load_config(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw)


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# ---------------------------------------------------------------- reports

def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return "inf" if np.isposinf(v) else repr(float(v))
    return v


def write_png(path, image, scale=1.0, peak=None):
    """8-bit grayscale PNG of ``image`` (real), divided by ``peak`` (default its max) then scaled."""
    from PIL import Image

    image = np.asarray(image, dtype=np.float64)
    peak = float(image.max()) if peak is None else float(peak)
    norm = image / peak if peak > 0 else np.zeros_like(image)
    px = np.clip(np.round(255.0 * scale * norm), 0, 255).astype(np.uint8)
    Image.fromarray(px, mode="L").save(path, format="PNG")
