"""Two-stage training (region priors, then code queriers), checkpoints, evaluation."""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from cdface import metrics
from cdface.codebook import RegionPrior, token_usage
from cdface.container import read_container, write_container
from cdface.corpus import Corpus
from cdface.errors import ConfigError, ContainerError, ContractViolation
from cdface.geometry import split_regions
from cdface.losses import (
    LossWeights,
    code_regularizer,
    lip_diversity_loss,
    lip_reconstruction_loss,
    total_losses,
    upper_losses,
)
from cdface.querier import CDFace, ModelConfig, rollout, teacher_forced_forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage: str = "prior"
    regions: tuple = ("lip", "upper")
    prior_epochs: int = 200
    query_epochs: int = 100
    lr: float = 1e-4
    query_lr: float = None  # falls back to lr
    batch_size: int = 8
    weight_decay: float = 0.01
    weights: LossWeights = field(default_factory=LossWeights)
    n_lip: int = 5
    n_upper: int = 3
    num_tokens: int = 256
    code_dim: int = 64
    codes_per_frame: int = 1
    prior_width: int = 64
    prior_depth: int = 1
    prior_context: int = None
    width: int = 64
    heads: int = 4
    depth: int = 1
    use_mask: bool = True
    per_frame_min: bool = True
    history_dropout: float = 0.5
    query_mode: str = "sequential"  # or "joint"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.regions = tuple(self.regions)
        if self.stage not in ("prior", "query"):
            raise ConfigError(f"stage must be 'prior' or 'query', got {self.stage!r}")
        if self.query_mode not in ("sequential", "joint"):
            raise ConfigError(f"query_mode must be 'sequential' or 'joint', got {self.query_mode!r}")
        for name in ("prior_epochs", "query_epochs", "batch_size", "n_lip", "n_upper", "num_tokens", "code_dim",
                     "codes_per_frame", "width", "heads", "depth"):
            if getattr(self, name) < 1 and not (name.endswith("epochs") and getattr(self, name) == 0):
                raise ConfigError(f"{name} must be positive")
        if self.lr <= 0 or (self.query_lr is not None and self.query_lr <= 0):
            raise ConfigError("learning rates must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regions"] = list(self.regions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def model_config(cfg: TrainConfig, corpus: Corpus) -> ModelConfig:
    part = corpus.partition
    return ModelConfig(
        lip_features=3 * part.lip_count,
        upper_features=3 * part.upper_count,
        audio_dim=corpus.feature_dim,
        num_styles=corpus.num_styles,
        num_tokens=cfg.num_tokens,
        code_dim=cfg.code_dim,
        codes_per_frame=cfg.codes_per_frame,
        prior_width=cfg.prior_width,
        prior_depth=cfg.prior_depth,
        prior_context=cfg.prior_context,
        width=cfg.width,
        heads=cfg.heads,
        depth=cfg.depth,
        n_lip=cfg.n_lip,
        n_upper=cfg.n_upper,
    )


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    kind: str  # "prior" or "query"
    params: dict  # parameter path -> np.ndarray
    config: dict
    model: dict
    epoch: int = 0
    log_tail: list = field(default_factory=list)
    optimizer: dict = field(default_factory=dict)  # array-free optimizer metadata
    optim_arrays: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def save(self, path) -> Path:
        arrays = {f"param.{k}": v for k, v in self.params.items()}
        arrays.update({f"optim.{k}": v for k, v in self.optim_arrays.items()})
        meta = {
            "kind": "checkpoint",
            "stage": self.kind,
            "config": self.config,
            "model": self.model,
            "epoch": self.epoch,
            "log_tail": self.log_tail,
            "optimizer": self.optimizer,
            "extra": self.extra,
        }
        return write_container(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = read_container(path)
        if meta.get("kind") != "checkpoint":
            raise ContainerError(f"{path} is not a checkpoint")
        return cls(
            kind=meta["stage"],
            params={k[6:]: v for k, v in arrays.items() if k.startswith("param.")},
            config=meta["config"],
            model=meta["model"],
            epoch=meta["epoch"],
            log_tail=meta["log_tail"],
            optimizer=meta["optimizer"],
            optim_arrays={k[6:]: v for k, v in arrays.items() if k.startswith("optim.")},
            extra=meta.get("extra", {}),
        )


def state_arrays(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def load_state(module: torch.nn.Module, arrays: dict, strict: bool = True) -> None:
    own = module.state_dict()
    missing = set(own) - set(arrays)
    if strict and missing:
        raise ContainerError(f"checkpoint lacks parameters {sorted(missing)[:5]}...")
    state = {}
    for k, ref in own.items():
        if k in arrays:
            arr = np.asarray(arrays[k])
            if tuple(arr.shape) != tuple(ref.shape):
                raise ContainerError(f"parameter {k}: checkpoint shape {arr.shape} vs model {tuple(ref.shape)}")
            state[k] = torch.from_numpy(arr.copy()).to(ref.dtype)
        else:
            state[k] = ref
    module.load_state_dict(state)


def params_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _optim_export(opt: torch.optim.Optimizer):
    sd = opt.state_dict()
    arrays, steps = {}, {}
    for idx, st in sd["state"].items():
        for name, val in st.items():
            if name == "step":
                steps[str(idx)] = float(val)
            else:
                arrays[f"{idx}.{name}"] = val.detach().cpu().numpy()
    return {"steps": steps, "param_groups": sd["param_groups"]}, arrays


def _optim_import(opt: torch.optim.Optimizer, meta: dict, arrays: dict) -> None:
    state = {}
    for idx, step in meta["steps"].items():
        st = {"step": torch.tensor(step)}
        for name in ("exp_avg", "exp_avg_sq"):
            st[name] = torch.from_numpy(np.array(arrays[f"{idx}.{name}"]))
        state[int(idx)] = st
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def _make_optimizer(params, cfg: TrainConfig, lr: float):
    return torch.optim.AdamW(params, lr=lr, weight_decay=cfg.weight_decay)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


class _LogWriter:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.epochs = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def step(self, record: dict):
        if self.path:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def epoch(self, record: dict):
        self.epochs.append(record)
        self.step(dict(record, kind="epoch"))


# --------------------------------------------------------------------------
# stage 1: region priors


def _region_data(corpus: Corpus, region: str, split: str = "train"):
    data = []
    for clip in corpus.clips(split):
        lip, upper = split_regions(clip.motion, corpus.partition)
        data.append((lip if region == "lip" else upper).offsets.astype(np.float32))
    if not data:
        raise ContractViolation(f"corpus split {split!r} is empty")
    return data


def build_prior(cfg: TrainConfig, corpus: Corpus, region: str) -> RegionPrior:
    mc = model_config(cfg, corpus)
    width = mc.lip_features if region == "lip" else mc.upper_features
    return RegionPrior(
        width,
        region,
        num_tokens=cfg.num_tokens,
        code_dim=cfg.code_dim,
        codes_per_frame=cfg.codes_per_frame,
        width=cfg.prior_width,
        heads=cfg.heads,
        depth=cfg.prior_depth,
        context=cfg.prior_context,
    )


def train_prior(cfg: TrainConfig, corpus: Corpus, region: str, log_path=None, resume: Checkpoint = None,
                epochs: int = None) -> Checkpoint:
    if region not in ("lip", "upper"):
        raise ContractViolation(f"unknown region {region!r}")
    set_determinism(cfg.seed)
    data = _region_data(corpus, region)
    prior = build_prior(cfg, corpus, region)
    prior.set_scale(data)
    opt = _make_optimizer(prior.parameters(), cfg, cfg.lr)
    start = 0
    writer = _LogWriter(log_path)
    if resume is not None:
        if resume.kind != "prior" or resume.extra.get("region") != region:
            raise ContractViolation("resume checkpoint is not a prior for this region")
        load_state(prior, resume.params)
        _optim_import(opt, resume.optimizer, resume.optim_arrays)
        start = resume.epoch
        writer.epochs = list(resume.log_tail)
    end = cfg.prior_epochs if epochs is None else start + epochs
    tensors = [torch.from_numpy(x)[None] for x in data]
    step = 0
    for epoch in range(start, end):
        prior.train()
        sums = {"total": 0.0, "reconstruction": 0.0, "codebook": 0.0, "commitment": 0.0}
        for batch in _batches(len(tensors), cfg.batch_size, cfg.seed, epoch):
            opt.zero_grad()
            total = 0.0
            parts = {}
            for i in batch:
                loss, terms = prior.loss(tensors[i])
                total = total + loss
                for k, v in terms.items():
                    parts[k] = parts.get(k, 0.0) + float(v.detach())
            total = total / len(batch)
            total.backward()
            opt.step()
            step += 1
            sums["total"] += float(total.detach()) * len(batch)
            for k, v in parts.items():
                sums[k] += v
            writer.step({"kind": "step", "stage": "prior", "region": region, "epoch": epoch, "step": step,
                         "loss": float(total.detach()), **{k: v / len(batch) for k, v in parts.items()}})
        record = {"stage": "prior", "region": region, "epoch": epoch + 1,
                  **{k: v / len(tensors) for k, v in sums.items()}}
        writer.epoch(record)
    usage = token_usage(prior, data)
    writer.step({"kind": "codebook_usage", "region": region, "counts": usage.tolist()})
    opt_meta, opt_arrays = _optim_export(opt)
    return Checkpoint(
        kind="prior",
        params=state_arrays(prior),
        config=cfg.to_dict(),
        model=model_config(cfg, corpus).to_dict(),
        epoch=end,
        log_tail=writer.epochs[-400:],
        optimizer=opt_meta,
        optim_arrays=opt_arrays,
        extra={"region": region, "tokens_used": int((usage > 0).sum())},
    )


def load_prior(ckpt: Checkpoint, cfg: TrainConfig, corpus: Corpus) -> RegionPrior:
    prior = build_prior(cfg, corpus, ckpt.extra["region"])
    load_state(prior, ckpt.params)
    return prior


# --------------------------------------------------------------------------
# stage 2: code queriers


@dataclass
class _QueryClip:
    lip: torch.Tensor
    upper: torch.Tensor
    audio: torch.Tensor
    style: int
    mask: torch.Tensor


def _query_data(corpus: Corpus, split: str, use_mask: bool):
    from cdface.audio import align_to_motion, extract_features

    out = []
    for clip in corpus.clips(split):
        lip, upper = split_regions(clip.motion, corpus.partition)
        feats = align_to_motion(extract_features(clip, "synthetic", corpus.feature_dim), clip.motion.fps,
                                clip.num_frames)
        mask = clip.mask_gt.values if use_mask else np.ones(clip.num_frames, dtype=np.int64)
        out.append(
            _QueryClip(
                torch.from_numpy(lip.offsets.astype(np.float32)),
                torch.from_numpy(upper.offsets.astype(np.float32)),
                torch.from_numpy(np.asarray(feats, dtype=np.float32)),
                clip.style,
                torch.from_numpy(mask.astype(np.float32)),
            )
        )
    return out


def query_terms(model: CDFace, clip: _QueryClip, regions, per_frame: bool = True) -> dict:
    """Raw (unweighted) loss terms for one clip under teacher forcing."""
    out = teacher_forced_forward(model, clip.lip, clip.upper, clip.audio, clip.style, clip.mask, regions)
    # motion-space terms in each prior's scale-normalized units
    s_lip, s_up = model.priors["lip"].scale, model.priors["upper"].scale
    terms = {}
    if "lip" in regions:
        lip, gt = out["lip"] / s_lip, clip.lip / s_lip
        if lip.shape[0] >= 2:
            terms["lip_diversity"] = lip_diversity_loss(lip, clip.mask)
        terms["lip_reconstruction"] = lip_reconstruction_loss(lip, gt, clip.mask, per_frame)
        terms["lip_regularizer"] = code_regularizer(out["lip_codes"], model.priors["lip"].codebook.tokens)
    if "upper" in regions:
        div, rec = upper_losses(out["upper"] / s_up, clip.upper / s_up, per_frame)
        terms["upper_diversity"] = div
        terms["upper_reconstruction"] = rec
        terms["upper_regularizer"] = code_regularizer(out["upper_codes"], model.priors["upper"].codebook.tokens)
    return terms


def build_model(cfg: TrainConfig, corpus: Corpus, lip_prior: Checkpoint, upper_prior: Checkpoint) -> CDFace:
    model = CDFace(model_config(cfg, corpus))
    for region, ck in (("lip", lip_prior), ("upper", upper_prior)):
        if ck is None:
            raise ContractViolation(f"missing {region} prior checkpoint")
        if ck.kind != "prior" or ck.extra.get("region") != region:
            raise ContractViolation(f"checkpoint given for the {region} prior is not a {region} prior")
        load_state(model.priors[region], ck.params)
    model.sync_scales()
    model.freeze_priors()
    return model


def _run_query_stage(model, data, cfg, regions, trainable, writer, stage_name, epochs):
    params = [p for m in trainable for p in m.parameters()]
    opt = _make_optimizer(params, cfg, cfg.query_lr or cfg.lr)
    w = cfg.weights
    step = 0
    for epoch in range(epochs):
        model.train()
        sums = {}
        for batch in _batches(len(data), cfg.batch_size, cfg.seed, epoch):
            opt.zero_grad()
            acc = 0.0
            for i in batch:
                terms = query_terms(model, data[i], regions, cfg.per_frame_min)
                lip_loss, upper_loss, breakdown = total_losses(terms, w)
                loss = (lip_loss if "lip" in regions else 0.0) + (upper_loss if "upper" in regions else 0.0)
                acc = acc + loss
                for k, v in breakdown.items():
                    sums[k] = sums.get(k, 0.0) + v
            acc = acc / len(batch)
            acc.backward()
            opt.step()
            step += 1
            writer.step({"kind": "step", "stage": stage_name, "epoch": epoch, "step": step, "loss": float(acc.detach())})
        writer.epoch({"stage": stage_name, "epoch": epoch + 1, **{k: v / len(data) for k, v in sums.items()}})


def train_query(cfg: TrainConfig, corpus: Corpus, lip_prior: Checkpoint, upper_prior: Checkpoint,
                log_path=None) -> Checkpoint:
    set_determinism(cfg.seed)
    model = build_model(cfg, corpus, lip_prior, upper_prior)
    model.set_history_dropout(cfg.history_dropout)
    before = params_digest(model.priors)
    data = _query_data(corpus, "train", cfg.use_mask)
    writer = _LogWriter(log_path)
    if cfg.query_mode == "joint":
        _run_query_stage(model, data, cfg, ("lip", "upper"), [model.lip, model.upper], writer, "joint",
                         cfg.query_epochs)
    else:
        _run_query_stage(model, data, cfg, ("lip",), [model.lip], writer, "lip", cfg.query_epochs)
        for p in model.lip.parameters():
            p.requires_grad_(False)
        _run_query_stage(model, data, cfg, ("upper",), [model.upper], writer, "upper", cfg.query_epochs)
    after = params_digest(model.priors)
    if before != after:
        raise RuntimeError("frozen prior parameters changed during query training")
    return Checkpoint(
        kind="query",
        params=state_arrays(model),
        config=cfg.to_dict(),
        model=model.cfg.to_dict(),
        epoch=cfg.query_epochs,
        log_tail=writer.epochs[-400:],
        extra={"prior_digest": after},
    )


@torch.no_grad()
def reconstruction_error(model: CDFace, corpus: Corpus, split: str = "train", use_mask: bool = True) -> float:
    """Teacher-forced lip + upper reconstruction terms per frame, averaged over a split."""
    model.eval()
    total, frames = 0.0, 0
    for clip in _query_data(corpus, split, use_mask):
        terms = query_terms(model, clip, ("lip", "upper"))
        total += float(terms["lip_reconstruction"] + terms["upper_reconstruction"])
        frames += clip.lip.shape[0]
    return total / frames


def load_model(ckpt: Checkpoint) -> CDFace:
    if ckpt.kind != "query":
        raise ContractViolation("not a query-stage checkpoint")
    model = CDFace(ModelConfig(**ckpt.model))
    load_state(model, ckpt.params)
    model.freeze_priors()
    model.eval()
    return model


# --------------------------------------------------------------------------
# evaluation


def clip_audio(corpus: Corpus, clip):
    from cdface.audio import align_to_motion, extract_features

    seq = extract_features(clip, "synthetic", corpus.feature_dim)
    return align_to_motion(seq, clip.motion.fps, clip.num_frames)


def clip_metrics(samples, clip, corpus: Corpus) -> dict:
    """Metric battery of an S x T x 3V sample set against one corpus clip."""
    part = corpus.partition
    samples = np.asarray(samples)
    gt = clip.motion.offsets
    m = {
        "LVE": metrics.lve(samples[0], gt, part),
        "MVE": metrics.mve(samples[0], gt),
        "FDD": metrics.fdd(samples[0], gt, part),
        "ALVE": metrics.alve(samples, gt, part),
        "closure_violations": metrics.closure_violations(samples, corpus.template, part, clip.mask_gt.values,
                                                         corpus.epsilon),
        "closed_frames": int((clip.mask_gt.values == 0).sum()),
    }
    if samples.shape[0] >= 2:
        m.update(APD=metrics.apd(samples), UPD=metrics.upd(samples, part), LPD=metrics.lpd(samples, part),
                 MPD=metrics.mpd(samples))
    else:
        m.update(APD=0.0, UPD=0.0, LPD=0.0, MPD=0.0)
    return m


def summarize(per_clip: dict, sample_count: int, corpus: Corpus, **extra) -> "metrics.MetricReport":
    report = metrics.MetricReport(sample_count=int(sample_count), partition=corpus.partition.to_dict())
    for name in ("LVE", "MVE", "FDD", "ALVE", "APD", "UPD", "LPD", "MPD"):
        report.add(name, np.mean([c[name] for c in per_clip.values()]))
    report.add("closure_violations", sum(c["closure_violations"] for c in per_clip.values()), "count")
    report.add("closed_frames", sum(c["closed_frames"] for c in per_clip.values()), "frames")
    report.extra = {**extra, "clips": per_clip}
    return report


def _evaluate_clip(model: CDFace, corpus: Corpus, clip, n_lip, n_upper, control: bool):
    part, template = corpus.partition, corpus.template
    audio = clip_audio(corpus, clip)
    if control:
        base = rollout(model, audio, clip.style, 1, 1)
        res = rollout(model, audio, clip.style, n_upper=n_upper, fixed_lip=base["lip"][0], partition=part)
    else:
        res = rollout(model, audio, clip.style, n_lip, n_upper, partition=part)
    samples = res["full"]
    return clip_metrics(samples, clip, corpus), metrics.aperture_curves(samples, template, part), samples.shape[0]


def evaluate(model: CDFace, corpus: Corpus, split: str = "test", n_lip: int = None, n_upper: int = None,
             control: bool = False, workers: int = 1):
    """Roll out every clip of a split and aggregate the metric battery.

    Returns (MetricReport, {clip name: S x T aperture curves}). Accuracy
    metrics (LVE, MVE, FDD) use the first sample; ALVE averages all samples.
    In control mode the lip track of each clip comes from a single-head lip
    rollout and is shared by all upper samples. Clips are independent, so
    ``workers > 1`` spreads them over a thread pool; results keep clip order.
    """
    clips = list(corpus.clips(split))
    if not clips:
        raise ContractViolation(f"split {split!r} has no clips")
    model.eval()
    job = lambda clip: _evaluate_clip(model, corpus, clip, n_lip, n_upper, control)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, clips))
    else:
        results = [job(c) for c in clips]
    per_clip = {c.name: r[0] for c, r in zip(clips, results)}
    curves = {c.name: r[1] for c, r in zip(clips, results)}
    report = summarize(per_clip, results[0][2], corpus, split=split, control=control)
    return report, curves
