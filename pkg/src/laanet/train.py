"""Training loop, evaluation and checkpointing shared by the CLI and the tests."""
import json
import logging
import os
import platform
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from . import __version__
from .channels import ChannelSpec, extract_channels
from .losses import RCAConfig, photometric_loss, rca_loss, total_loss
from .metrics import compute_metrics, mean_report
from .networks import LAANet, DisparityActivationConfig, beta_for_range
from .synth import make_triplet

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "laa-ckpt-v1"


@dataclass
class TrainConfig:
    lr: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 4
    max_depth_m: float = 80.0
    channel_spec: str = "R"
    g: float = 1.3938
    attenuation_kind: str = "exponential"
    steps: int = 2000
    seed: int = 0
    snapshot_interval: int = 500
    # architecture / desk-scale preset
    width: int = 32
    la_width: int = 16
    pose_width: int = 16
    pose_convs: int = 7
    use_la: bool = True
    replicate_single_channel: bool = False
    smoothness_weight: float = 0.0
    init_depth: float = 1.0
    # synthetic corpus
    image_size: int = 64
    n_train_scenes: int = 256
    n_eval_scenes: int = 32
    scatter_noise: float = 0.05
    data_seed: int = 1234
    # evaluation
    cap_m: float = 80.0
    median_scaling: bool = True

    def validate(self):
        """Return every problem with this config (empty list when valid)."""
        errors = []
        for name in ("lr", "max_depth_m", "g", "cap_m"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be positive (got {getattr(self, name)})")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                errors.append(f"{name} must lie in [0, 1) (got {getattr(self, name)})")
        for name in ("batch_size", "steps", "width", "la_width", "pose_width", "pose_convs", "image_size",
                     "n_train_scenes", "n_eval_scenes", "snapshot_interval"):
            if int(getattr(self, name)) < 1:
                errors.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.image_size % 32:
            errors.append(f"image_size must be divisible by 32 (got {self.image_size})")
        if self.scatter_noise < 0:
            errors.append("scatter_noise must be non-negative")
        try:
            ChannelSpec.parse(self.channel_spec)
        except ValueError as e:
            errors.append(f"channel_spec: {e}")
        try:
            RCAConfig(g=self.g if self.g > 0 else 1.0, attenuation_kind=self.attenuation_kind)
        except ValueError as e:
            errors.append(f"attenuation_kind: {e}")
        return errors

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        out = {}
        for k, v in d.items():
            default = known[k].default
            if isinstance(default, bool) and isinstance(v, str):
                v = v.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, (int, float)) and not isinstance(default, bool):
                v = type(default)(v)
            else:
                v = str(v) if isinstance(default, str) else v
            out[k] = v
        return cls(**out)


class ConfigError(ValueError):
    pass


def check_config(cfg: TrainConfig):
    errors = cfg.validate()
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))


def build_model(cfg: TrainConfig) -> LAANet:
    spec = ChannelSpec.parse(cfg.channel_spec)
    in_ch = 3 if (cfg.replicate_single_channel and len(spec) == 1) else len(spec)
    act = DisparityActivationConfig(beta=beta_for_range(cfg.max_depth_m))
    rca = RCAConfig(g=cfg.g, attenuation_kind=cfg.attenuation_kind)
    return LAANet(in_ch, cfg.width, cfg.la_width, cfg.pose_width, cfg.pose_convs, act=act, rca=rca,
                  use_la=cfg.use_la, init_depth=cfg.init_depth)


class Corpus:
    """In-memory triplets: ``targets`` (N,3,H,W), ``sources`` (N,2,3,H,W),
    per-sample intrinsics ``Ks`` (N,3,3) and optional ``depth_gt`` (N,1,H,W)."""

    def __init__(self, targets, sources, Ks, depth_gt=None, poses=None):
        self.targets, self.sources, self.Ks = targets, sources, Ks
        self.depth_gt, self.poses = depth_gt, poses

    def __len__(self):
        return len(self.targets)

    @classmethod
    def from_triplets(cls, triplets):
        """Stack :class:`laanet.data.FrameTriplet` objects (all the same crop)."""
        triplets = list(triplets)
        if not triplets:
            raise ValueError("no triplets to build a corpus from")
        targets = torch.stack([t.target for t in triplets])
        sources = torch.stack([torch.stack(t.sources) for t in triplets])
        Ks = torch.stack([t.intrinsics.matrix() for t in triplets])
        gt = None
        if all(t.gt_depth is not None for t in triplets):
            gt = torch.stack([t.gt_depth for t in triplets])
        return cls(targets, sources, Ks, gt)


class SyntheticCorpus(Corpus):
    """Fixed set of synthetic triplets held as float32 tensors."""

    def __init__(self, n, seed, size=64, scatter_noise=0.05, **triplet_kw):
        trips = [make_triplet(seed + i, (size, size), scatter_noise=scatter_noise, **triplet_kw)
                 for i in range(n)]
        t = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float32))
        K = trips[0].intrinsics.matrix()
        super().__init__(t([tr.target for tr in trips]), t([tr.sources for tr in trips]),
                         K.expand(n, 3, 3).clone(), t([tr.depth_gt for tr in trips])[:, None],
                         t([tr.poses for tr in trips]))
        self.K = trips[0].intrinsics
        self.kinds = [tr.scene.params["kind"] for tr in trips]


def prepare_inputs(cfg: TrainConfig, target, sources):
    spec = ChannelSpec.parse(cfg.channel_spec)
    rep = 3 if cfg.replicate_single_channel else None
    tgt = extract_channels(target, spec, rep)
    srcs = [extract_channels(s, spec, rep) for s in sources]
    red = target[:, 0:1]
    return tgt, srcs, red


def compute_losses(model, cfg, target, sources, K):
    tgt, srcs, red = prepare_inputs(cfg, target, sources)
    out = model(tgt, srcs, red)
    L_p = photometric_loss(tgt, srcs, out["depths"], out["poses"], K, cfg.smoothness_weight)
    if out["la"] is not None:
        L_2 = rca_loss(out["la"].depth_pred, out["depths"][0])
    else:
        L_2 = L_p.new_zeros(())
    return total_loss(L_p, L_2), out


@torch.no_grad()
def predict_depth(model, cfg, images, batch=16):
    model.eval()
    preds = []
    for i in range(0, len(images), batch):
        target = images[i:i + batch]
        tgt, _, red = prepare_inputs(cfg, target, [])
        depths, _ = model.depth(tgt, red)
        preds.append(depths[0])
    model.train()
    return torch.cat(preds)


def evaluate(model, cfg, images, depth_gt, caps=None, median_scaling=None):
    """Per-image metrics averaged over the set; one report per cap."""
    caps = caps or [cfg.cap_m]
    ms = cfg.median_scaling if median_scaling is None else median_scaling
    pred = predict_depth(model, cfg, images).numpy()
    gt = depth_gt.numpy() if torch.is_tensor(depth_gt) else depth_gt
    return {cap: mean_report([compute_metrics(p[0], g[0], cap, median_scaling=ms) for p, g in zip(pred, gt)])
            for cap in caps}


def code_version():
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=os.path.dirname(__file__), timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir, cfg, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "config": asdict(cfg),
        "seed": cfg.seed,
        "code_version": code_version(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "photometric_scale_weights": [1.0, 1.0, 1.0, 1.0],
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **(extra or {}),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def save_checkpoint(path, model, optimizer, cfg, step):
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "step": step,
        "config": asdict(cfg),
        "alpha": model.act.alpha,
        "beta": model.act.beta,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }, path)


def load_checkpoint(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint (format={ckpt.get('format')!r})")
    cfg = TrainConfig(**ckpt["config"])
    model = build_model(cfg)
    model.load_state_dict(ckpt["model"])
    return model, cfg, ckpt


@dataclass
class TrainResult:
    model: LAANet
    history: list = field(default_factory=list)
    step: int = 0
    checkpoint: str = None


def train(cfg: TrainConfig, corpus: Corpus = None, out_dir=None, resume=None, log_every=1,
          progress=None) -> TrainResult:
    """Optimise ``L_p + L_2`` with Adam on a synthetic corpus.

    With ``out_dir`` set, writes ``manifest.json``, ``loss_log.jsonl`` (one
    record per step) and ``checkpoint.pt`` (plus snapshots every
    ``snapshot_interval`` steps). ``resume`` continues from a checkpoint's
    step counter and optimiser state.
    """
    check_config(cfg)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if corpus is None:
        corpus = SyntheticCorpus(cfg.n_train_scenes, cfg.data_seed, cfg.image_size, cfg.scatter_noise)

    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))
    start = 0
    if resume is not None:
        ckpt = torch.load(resume, map_location="cpu", weights_only=False)
        if ckpt.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{resume}: not a {CHECKPOINT_FORMAT} checkpoint")
        model.load_state_dict(ckpt["model"])
        if ckpt.get("optimizer"):
            opt.load_state_dict(ckpt["optimizer"])
        start = int(ckpt["step"])
        rng = np.random.default_rng([cfg.seed, start])

    log_file = None
    if out_dir is not None:
        write_manifest(out_dir, cfg, {"resumed_from": resume, "start_step": start})
        log_file = open(os.path.join(out_dir, "loss_log.jsonl"), "a")

    history = []
    model.train()
    end = start + cfg.steps
    try:
        for step in range(start + 1, end + 1):
            idx = rng.choice(len(corpus), size=cfg.batch_size, replace=len(corpus) < cfg.batch_size)
            target = corpus.targets[idx]
            sources = [corpus.sources[idx, 0], corpus.sources[idx, 1]]
            losses, _ = compute_losses(model, cfg, target, sources, corpus.Ks[idx])
            opt.zero_grad()
            losses.total.backward()
            opt.step()
            rec = {"step": step, **losses.as_floats()}
            history.append(rec)
            if log_file and step % log_every == 0:
                log_file.write(json.dumps(rec) + "\n")
            if progress and step % progress == 0:
                log.info("step %d  L_p %.4f  L_2 %.4f  total %.4f", step, rec["L_p"], rec["L_2"], rec["total"])
            if out_dir is not None and step % cfg.snapshot_interval == 0 and step != end:
                save_checkpoint(os.path.join(out_dir, f"snapshot_{step:06d}.pt"), model, opt, cfg, step)
    finally:
        if log_file:
            log_file.close()

    ckpt_path = None
    if out_dir is not None:
        ckpt_path = os.path.join(out_dir, "checkpoint.pt")
        save_checkpoint(ckpt_path, model, opt, cfg, end)
    return TrainResult(model, history, end, ckpt_path)
