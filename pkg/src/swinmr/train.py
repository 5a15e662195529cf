"""Desk-scale dataset assembly, training loop, checkpoints and evaluation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import smrt
from . import tensor as T
from .kspace import (ParameterError, UndersamplingMask, degrade, fft2c, import_volume, make_mask,
                     synth_phantom, synth_sensitivity_maps)
from .losses import ConvFeatureExtractor, LossWeights, freq_loss, perceptual_loss, pixel_loss, total_loss
from .metrics import display_psnr, frechet_distance, psnr, ssim
from .model import SwinMR, SwinMRConfig
from .tensor import Tensor

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NAN, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class NaNLossError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    kind: str = "phantom"            # "phantom" or "import"
    count: int = 10
    size: int = 32
    phantom_kind: str = "random_ellipses"
    coils: int = 4
    seed: int = 0
    split: Tuple[int, int, int] = (5, 2, 3)
    import_path: Optional[str] = None


@dataclass
class MaskSpec:
    trajectory: str = "gaussian1d"
    ratio: float = 0.3
    center_fraction: Optional[float] = None
    seed: int = 0

    def build(self, H: int, W: int) -> UndersamplingMask:
        return make_mask(self.trajectory, H, W, self.ratio, self.center_fraction, self.seed)


@dataclass
class OptimSpec:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    steps: int = 500
    batch: int = 2


def _tiny_model():
    return SwinMRConfig(rstb=1, stl=2, channels=16, window=4, heads=2, patch_number=32)


@dataclass
class ExperimentConfig:
    model: SwinMRConfig = field(default_factory=_tiny_model)
    loss: LossWeights = field(default_factory=LossWeights)
    mask: MaskSpec = field(default_factory=MaskSpec)
    noise_level: float = 0.0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    crop: int = 32
    eval_every: int = 100
    checkpoint_every: int = 0
    seed: int = 0
    perceptual_seed: int = 1234
    out_dir: str = "runs/default"

    def validate(self):
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.crop % self.model.window:
            raise ConfigError(f"crop {self.crop} must be divisible by window {self.model.window}")
        if self.dataset.kind == "phantom" and self.crop > self.dataset.size:
            raise ConfigError(f"crop {self.crop} exceeds image size {self.dataset.size}")
        if self.dataset.kind not in ("phantom", "import"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if self.dataset.kind == "import" and not self.dataset.import_path:
            raise ConfigError("import datasets need import_path")
        if not 0.0 <= self.noise_level < 1.0:
            raise ConfigError("noise_level must lie in [0, 1)")
        if self.optim.steps < 0 or self.optim.batch < 1 or self.optim.lr <= 0:
            raise ConfigError("optimizer needs steps >= 0, batch >= 1, lr > 0")
        if len(self.dataset.split) != 3 or min(self.dataset.split) < 0 or sum(self.dataset.split) <= 0:
            raise ConfigError("split must be three nonnegative weights")
        if not 0.0 < self.mask.ratio <= 1.0:
            raise ConfigError("mask ratio must lie in (0, 1]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["split"] = list(self.dataset.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {"model": SwinMRConfig, "loss": LossWeights, "mask": MaskSpec,
                  "dataset": DatasetSpec, "optim": OptimSpec}
        try:
            for key, typ in nested.items():
                if key in d and isinstance(d[key], dict):
                    sub_known = {f.name for f in fields(typ)}
                    bad = set(d[key]) - sub_known
                    if bad:
                        raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
                    d[key] = typ(**d[key])
            if isinstance(d.get("dataset"), DatasetSpec):
                d["dataset"].split = tuple(d["dataset"].split)
            return cls(**d).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at offset {exc.pos}") from exc


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class Sample:
    """Ground truth x (RSS-consistent), maps S_q, coil images x_q = S_q x, coil k-space y_q."""

    x: np.ndarray
    maps: np.ndarray
    coils: np.ndarray
    kspace: np.ndarray


def split_sizes(n: int, ratios: Sequence[int]) -> Tuple[int, ...]:
    """Largest-remainder apportionment of ``n`` items by ``ratios``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    exact = n * ratios / ratios.sum()
    sizes = np.floor(exact).astype(int)
    order = np.argsort(-(exact - sizes), kind="stable")
    for i in order[: n - sizes.sum()]:
        sizes[i] += 1
    return tuple(int(s) for s in sizes)


def _sample_from_x(x, maps):
    coils = maps * x[None]
    return Sample(x=x, maps=maps, coils=coils, kspace=fft2c(coils))


def _sample_from_coils(coils):
    coils = coils.astype(np.complex128)
    x = np.sqrt(np.sum(np.abs(coils) ** 2, axis=0))
    S = coils.shape[0]
    safe = np.where(x > 0, x, 1.0)
    maps = np.where(x[None] > 0, coils / safe[None], 1.0 / np.sqrt(S))
    return Sample(x=x, maps=maps, coils=coils, kspace=fft2c(coils))


def build_dataset(cfg: ExperimentConfig) -> Dict[str, List[Sample]]:
    """Deterministic train/val/test splits.

    Phantom datasets run the acquisition model forward (phantom -> maps ->
    coils -> k-space). Imported coil data goes the other way: x is the RSS
    combination and each map is x_q / x, so x_q = S_q x holds exactly.
    """
    ds = cfg.dataset
    rng = np.random.default_rng(ds.seed)
    samples: List[Sample] = []
    if ds.kind == "phantom":
        kinds = ("shepp_logan", "random_ellipses") if ds.phantom_kind == "mixed" else (ds.phantom_kind,)
        for i in range(ds.count):
            kind = kinds[i % len(kinds)]
            x = synth_phantom(ds.size, ds.size, kind, seed=int(rng.integers(2 ** 31)))
            maps = synth_sensitivity_maps(ds.coils, ds.size, ds.size, seed=int(rng.integers(2 ** 31))).data
            samples.append(_sample_from_x(x, maps))
    else:
        vol = import_volume(ds.import_path)
        samples = [_sample_from_coils(v) for v in vol]
    order = rng.permutation(len(samples))
    n_train, n_val, n_test = split_sizes(len(samples), ds.split)
    picked = [samples[i] for i in order]
    return {
        "train": picked[:n_train],
        "val": picked[n_train:n_train + n_val],
        "test": picked[n_train + n_val:n_train + n_val + n_test],
    }


def random_crop(rng, H: int, W: int, side: int) -> Tuple[int, int]:
    return int(rng.integers(0, H - side + 1)), int(rng.integers(0, W - side + 1))


def crop_pair(sample: Sample, x_u: np.ndarray, top: int, left: int, side: int):
    """Aligned crops of the network input, ground truth, maps and coil targets."""
    sl = (slice(top, top + side), slice(left, left + side))
    coils = sample.coils[(slice(None),) + sl]
    return {
        "x_u": x_u[sl],
        "x": sample.x[sl],
        "maps": sample.maps[(slice(None),) + sl],
        "coils": coils,
        # frequency targets come from the FFT of the cropped region
        "kspace": fft2c(coils),
    }


def pad_to_multiple(img: np.ndarray, m: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    H, W = img.shape[-2:]
    ph, pw = (-H) % m, (-W) % m
    if ph == 0 and pw == 0:
        return img, (H, W)
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad, mode="reflect"), (H, W)


def crop_to(img: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    return img[..., : shape[0], : shape[1]]


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: List[Tensor], lr=2e-4, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoints and logs
# ---------------------------------------------------------------------------


def save_checkpoint(directory, model: SwinMR, cfg: ExperimentConfig, step: int) -> Path:
    """Manifest (config, step, seed, parameter names/shapes) plus one SMRT1 file per parameter."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (name, p) in enumerate(model.named_parameters()):
        fname = f"params/{i:04d}.smrt"
        smrt.save(directory / fname, p.data)
        entries.append({"name": name, "shape": list(p.shape), "file": fname})
    manifest = {"config": cfg.to_dict(), "step": step, "seed": cfg.seed, "parameters": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_checkpoint(directory) -> Tuple[SwinMR, ExperimentConfig, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    cfg = ExperimentConfig.from_dict(manifest["config"])
    model = SwinMR(cfg.model, seed=cfg.seed)
    state = {e["name"]: smrt.load(directory / e["file"]).reshape(e["shape"]) for e in manifest["parameters"]}
    model.load_state_dict(state)
    return model, cfg, manifest


class RunLog:
    """Append-only per-step and per-evaluation records, mirrored to JSON-lines files."""

    def __init__(self, log_dir: Optional[Path] = None):
        self.steps: List[dict] = []
        self.evals: List[dict] = []
        self.log_dir = Path(log_dir) if log_dir else None
        if self.log_dir:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            for name in ("train.jsonl", "metrics.jsonl"):
                (self.log_dir / name).write_text("")

    def _append(self, records, name, rec):
        if records and rec["step"] <= records[-1]["step"] and name == "train.jsonl":
            raise ValueError("step indices must be strictly increasing")
        records.append(rec)
        if self.log_dir:
            with open(self.log_dir / name, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def log_step(self, step: int, loss: float, parts: Dict[str, float], wall: float):
        self._append(self.steps, "train.jsonl", {"step": step, "loss": loss, "loss_parts": parts, "wall_s": wall})

    def log_eval(self, step: int, split: str, psnr_: float, ssim_: float, frechet: Optional[float],
                 parts: Dict[str, float]):
        self._append(self.evals, "metrics.jsonl", {
            "step": step, "split": split, "psnr": psnr_, "ssim": ssim_, "frechet": frechet, "loss_parts": parts,
        })

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.steps])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _zero_filled(samples: List[Sample], mask: np.ndarray, nl: float, seeds) -> List[np.ndarray]:
    return [degrade(s.x, mask, nl, seed=int(sd))[0] for s, sd in zip(samples, seeds)]


def _loss_parts(model, batch, cfg, extractor):
    dt = np.dtype(cfg.model.dtype)
    x_u = np.stack([b["x_u"] for b in batch])[:, None].astype(dt)
    x = np.stack([b["x"] for b in batch])[:, None].astype(dt)
    maps = np.stack([b["maps"] for b in batch])
    coils = np.stack([b["coils"] for b in batch])
    ksp = np.stack([b["kspace"] for b in batch])
    x_hat = model(Tensor(x_u))
    eps = cfg.loss.eps
    parts = {"pixel": pixel_loss(x_hat, coils, maps, eps), "freq": freq_loss(x_hat, ksp, maps, eps)}
    if cfg.loss.gamma > 0:
        parts["perceptual"] = perceptual_loss(x, x_hat, extractor)
    return parts


def train(cfg: ExperimentConfig, out_dir=None, data: Optional[Dict[str, List[Sample]]] = None,
          progress: bool = False) -> Tuple[Path, RunLog]:
    """Optimise a SwinMR model and write a run directory.

    Layout: ``config.json``, ``checkpoints/step-N/``, ``logs/train.jsonl``,
    ``logs/metrics.jsonl``. Returns the final checkpoint directory and the log.
    """
    cfg.validate()
    run = Path(out_dir or cfg.out_dir)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(cfg.dumps())
    data = data if data is not None else build_dataset(cfg)
    train_set = data["train"]
    if not train_set:
        raise ConfigError("training split is empty")
    H, W = train_set[0].x.shape
    if cfg.crop > min(H, W):
        raise ConfigError(f"crop {cfg.crop} exceeds image size {H}x{W}")
    mask = cfg.mask.build(H, W).mask
    model = SwinMR(cfg.model, seed=cfg.seed)
    opt = Adam(model.parameters(), cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    extractor = ConvFeatureExtractor(seed=cfg.perceptual_seed)
    log = RunLog(run / "logs")
    rng = np.random.default_rng(cfg.seed + 1)
    if cfg.noise_level == 0:
        fixed_xu = _zero_filled(train_set, mask, 0.0, [0] * len(train_set))

    ckpt_dir = run / "checkpoints"
    last = save_checkpoint(ckpt_dir / "step-0", model, cfg, 0)
    eval_split = data["val"] or train_set
    eval_name = "val" if data["val"] else "train"
    last_parts: Dict[str, float] = {}

    def run_eval(step):
        res = evaluate(model, eval_split, cfg.mask, cfg.noise_level, seed=cfg.seed, extractor=extractor)
        log.log_eval(step, eval_name, res["recon"]["psnr_mean"], res["recon"]["ssim_mean"],
                     res["recon"]["frechet"], last_parts)

    if cfg.eval_every:
        run_eval(0)
    for step in range(1, cfg.optim.steps + 1):
        t0 = time.perf_counter()
        idx = rng.integers(0, len(train_set), size=cfg.optim.batch)
        if cfg.noise_level == 0:
            xus = [fixed_xu[i] for i in idx]
        else:
            xus = _zero_filled([train_set[i] for i in idx], mask, cfg.noise_level,
                               rng.integers(0, 2 ** 31, size=len(idx)))
        batch = []
        for i, xu in zip(idx, xus):
            top, left = random_crop(rng, H, W, cfg.crop)
            batch.append(crop_pair(train_set[i], xu, top, left, cfg.crop))
        opt.zero_grad()
        parts = _loss_parts(model, batch, cfg, extractor)
        loss = total_loss(parts, cfg.loss)
        value = loss.item()
        if not np.isfinite(value):
            dump = run / "logs" / f"nan-step-{step}.npz"
            np.savez(dump, **{f"{k}_{n}": v for n, b in enumerate(batch) for k, v in b.items()})
            raise NaNLossError(f"non-finite loss {value} at step {step}; last batch dumped to {dump}", dump)
        loss.backward()
        opt.step()
        last_parts = {k: v.item() for k, v in parts.items()}
        log.log_step(step, value, last_parts, time.perf_counter() - t0)
        if progress and (step % 50 == 0 or step == 1):
            logger.info("step %d loss %.5f", step, value)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            last = save_checkpoint(ckpt_dir / f"step-{step}", model, cfg, step)
        if cfg.eval_every and step % cfg.eval_every == 0:
            run_eval(step)
    if cfg.optim.steps and (not cfg.checkpoint_every or cfg.optim.steps % cfg.checkpoint_every):
        last = save_checkpoint(ckpt_dir / f"step-{cfg.optim.steps}", model, cfg, cfg.optim.steps)
    return last, log


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------


def reconstruct(model: SwinMR, x_u: np.ndarray) -> np.ndarray:
    """Run the network on one zero-filled image [H, W], reflect-padding to a window multiple."""
    dt = np.dtype(model.config.dtype)
    padded, shape = pad_to_multiple(np.asarray(x_u, dtype=dt), model.config.window)
    with T.no_grad():
        out = model(Tensor(padded[None, None]))
    return crop_to(out.data[0, 0], shape)


def evaluate(model, samples: List[Sample], mask_spec: MaskSpec, noise_level: float = 0.0, seed: int = 0,
             extractor=None) -> dict:
    """Per-image and aggregate PSNR/SSIM for the model and the zero-filled baseline.

    The zero-filled baseline is the network input itself (cast to the model
    dtype). Frechet distances to the ground-truth feature set are reported
    when there are at least two images.
    """
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)[0]
    extractor = extractor or ConvFeatureExtractor()
    dt = np.dtype(model.config.dtype)
    rows = []
    imgs = {"gt": [], "zf": [], "recon": []}
    masks = {}
    for i, s in enumerate(samples):
        shape = s.x.shape
        if shape not in masks:
            masks[shape] = mask_spec.build(*shape).mask
        x_u = degrade(s.x, masks[shape], noise_level, seed=seed + i)[0].astype(dt)
        rec = reconstruct(model, x_u)
        dr = float(s.x.max())
        rows.append({
            "index": i,
            "psnr_zf": psnr(s.x, x_u, dr), "ssim_zf": ssim(s.x, x_u, dr),
            "psnr_recon": psnr(s.x, rec, dr), "ssim_recon": ssim(s.x, rec, dr),
        })
        imgs["gt"].append(s.x)
        imgs["zf"].append(x_u)
        imgs["recon"].append(rec)

    def summary(kind):
        p = np.array([r[f"psnr_{kind}"] for r in rows])
        q = np.array([r[f"ssim_{kind}"] for r in rows])
        out = {"psnr_mean": float(p.mean()) if len(p) else float("nan"),
               "psnr_std": float(p.std()) if len(p) else float("nan"),
               "ssim_mean": float(q.mean()) if len(q) else float("nan"),
               "ssim_std": float(q.std()) if len(q) else float("nan"),
               "frechet": None}
        if len(rows) >= 2:
            out["frechet"] = frechet_distance(extractor.features(np.stack(imgs["gt"])),
                                              extractor.features(np.stack(imgs[kind])))
        return out

    return {"rows": rows, "recon": summary("recon"), "zf": summary("zf"), "extractor": extractor.name,
            "images": imgs}


def metrics_table(result: dict) -> List[dict]:
    """Flatten an :func:`evaluate` result into CSV-friendly rows (PSNR capped for display)."""
    table = []
    for r in result["rows"]:
        table.append({k: (display_psnr(v) if k.startswith("psnr") else v) for k, v in r.items()})
    for kind in ("zf", "recon"):
        s = result[kind]
        table.append({"index": f"mean({kind})", f"psnr_{kind}": display_psnr(s["psnr_mean"]),
                      f"ssim_{kind}": s["ssim_mean"], "frechet": s["frechet"]})
    return table
