"""AAM-softmax training, LR schedule and a finite-difference gradient checker."""

from __future__ import annotations

import csv
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import save_checkpoint
from .config import ModelConfig, TrainSchedule
from .errors import ContractError, InvalidInputError, NumericError
from .frontend import compute_log_mel, crop_frames, frame_count, read_manifest, read_wav, spec_augment
from .network import DSTDNN

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "step", "loss", "acc", "lr")


class AAMHead(nn.Module):
    """Additive angular margin classifier over L2-normalized embeddings."""

    def __init__(self, n_classes: int, dim: int = 192, margin: float = 0.2, scale: float = 30.0):
        super().__init__()
        if not 0 <= margin < math.pi / 2 or scale <= 0:
            raise InvalidInputError("need 0 <= margin < pi/2 and scale > 0")
        self.weight = nn.Parameter(torch.empty(n_classes, dim))
        nn.init.xavier_normal_(self.weight)
        self.margin = margin
        self.scale = scale

    def cosines(self, emb: torch.Tensor) -> torch.Tensor:
        norms = emb.norm(dim=1, keepdim=True)
        if (norms < 1e-12).any():
            raise NumericError("zero embedding cannot be normalized")
        w = self.weight / self.weight.norm(dim=1, keepdim=True)
        return (emb / norms) @ w.T

    def forward(self, emb: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return aam_loss(emb, labels, self)


def aam_loss(emb: torch.Tensor, labels: torch.Tensor, head: AAMHead) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean cross-entropy of s * [cos(theta_y + m) for the target, cos(theta_j) otherwise].

    theta_y + m is capped at pi, i.e. the target logit bottoms out at -s.
    """
    if labels.min() < 0 or labels.max() >= head.weight.shape[0]:
        raise InvalidInputError("label outside class range")
    cos = head.cosines(emb)
    m = head.margin
    sin = torch.sqrt(torch.clamp(1.0 - cos * cos, min=1e-12))
    phi = cos * math.cos(m) - sin * math.sin(m)
    phi = torch.where(cos >= -math.cos(m), phi, torch.full_like(phi, -1.0))
    onehot = nn.functional.one_hot(labels, cos.shape[1]).bool()
    logits = head.scale * torch.where(onehot, phi, cos)
    return nn.functional.cross_entropy(logits, labels), logits


# --------------------------------------------------------------------------
# schedule


def lr_at(step: int, total_steps: int, s: TrainSchedule) -> float:
    """Linear warmup to lr_start, then per-step geometric decay to lr_end.

    ``step`` counts optimizer updates from 1.
    """
    if s.warmup_steps and step <= s.warmup_steps:
        return s.lr_start * step / s.warmup_steps
    span = max(total_steps - s.warmup_steps, 1)
    frac = min(max(step - s.warmup_steps, 0) / span, 1.0)
    return s.lr_start * (s.lr_end / s.lr_start) ** frac


def param_groups(modules: Sequence[nn.Module], weight_decay: float) -> list[dict]:
    """Decay weights only; biases and batch-norm affine parameters are exempt."""
    decay, no_decay = [], []
    for mod in modules:
        for sub in mod.modules():
            for name, p in sub.named_parameters(recurse=False):
                if isinstance(sub, nn.modules.batchnorm._BatchNorm) or name == "bias":
                    no_decay.append(p)
                else:
                    decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


# --------------------------------------------------------------------------
# data


def crop_length(seconds: float, win: float = 0.025, hop: float = 0.010, sr: int = 16000) -> int:
    return frame_count(int(round(seconds * sr)), int(round(win * sr)), int(round(hop * sr)))


def load_features(rows: Sequence[dict]) -> dict[str, np.ndarray]:
    return {r["utt_id"]: compute_log_mel(read_wav(r["path"])).astype(np.float32) for r in rows}


@dataclass
class TrainResult:
    model: DSTDNN
    head: AAMHead
    speakers: list[str]
    metrics: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def _seed_dgf(model: DSTDNN, seed: int) -> None:
    for i, layer in enumerate(model.dgf_layers()):
        g = torch.Generator()
        g.manual_seed(seed * 1000 + i)
        layer.generator = g


def _run_stage(model, head, feats, labels_of, utts, sched: TrainSchedule, rng, step0: int,
               epoch0: int, metrics: list[dict], log_path: Path | None) -> int:
    opt = torch.optim.AdamW(param_groups([model, head], sched.weight_decay),
                            lr=sched.lr_start, betas=(0.9, 0.999), eps=1e-8)
    head.margin = sched.margin
    head.scale = sched.scale
    n_frames = crop_length(sched.crop_seconds)
    n_items = len(utts) * sched.crops_per_utterance
    per_epoch = math.ceil(n_items / sched.batch_size)
    if per_epoch > 1 and n_items % sched.batch_size == 1:
        # batch norm cannot train on a single item; fold it into the last full batch
        per_epoch -= 1
    total = per_epoch * sched.epochs
    step = 0
    for epoch in range(1, sched.epochs + 1):
        model.train()
        head.train()
        order = np.repeat(np.arange(len(utts)), sched.crops_per_utterance)
        order = order[rng.permutation(len(order))]
        loss_sum, correct, seen = 0.0, 0, 0
        for b in range(per_epoch):
            end = len(order) if b == per_epoch - 1 else (b + 1) * sched.batch_size
            idx = order[b * sched.batch_size:end]
            batch = np.stack([crop_frames(feats[utts[i]], n_frames, rng) for i in idx])
            if sched.spec_augment:
                batch = spec_augment(batch, rng=rng)
            x = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
            y = torch.tensor([labels_of[utts[i]] for i in idx])
            step += 1
            lr = lr_at(step, total, sched)
            for g in opt.param_groups:
                g["lr"] = lr
            emb = model(x)
            loss, _ = aam_loss(emb, y, head)
            if not torch.isfinite(loss):
                raise NumericError(f"loss diverged at epoch {epoch0 + epoch}, step {step0 + step} "
                                   f"(lr={lr:.3g}, loss={loss.item()})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_sum += loss.item() * len(idx)
            with torch.no_grad():
                # accuracy from margin-free cosines
                correct += int((head.cosines(emb).argmax(dim=1) == y).sum())
            seen += len(idx)
        row = {"epoch": epoch0 + epoch, "step": step0 + step, "loss": loss_sum / seen,
               "acc": correct / seen, "lr": lr}
        metrics.append(row)
        log.info("epoch %(epoch)d step %(step)d loss %(loss).4f acc %(acc).3f lr %(lr).2e", row)
        if log_path is not None:
            _append_metric(log_path, row)
    return step


def _append_metric(path: Path, row: dict) -> None:
    new = not path.exists()
    with path.open("a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow(row)


def train(manifest: str | Path | Sequence[dict], cfg: ModelConfig, schedule: TrainSchedule,
          seed: int = 0, out_dir: str | Path | None = None,
          features: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Train a DS-TDNN with AAM loss on a corpus manifest.

    Writes ``model.ckpt`` and ``metrics.csv`` into ``out_dir`` when given.
    Runs are deterministic for a fixed seed on a single thread.
    """
    rows = read_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    speakers = sorted({r["speaker_id"] for r in rows})
    if len(speakers) < 2:
        raise InvalidInputError("training needs at least two speakers")
    labels_of = {r["utt_id"]: speakers.index(r["speaker_id"]) for r in rows}
    utts = [r["utt_id"] for r in rows]
    feats = features if features is not None else load_features(rows)

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = DSTDNN(cfg)
    head = AAMHead(len(speakers), cfg.embedding_dim, schedule.margin, schedule.scale)
    _seed_dgf(model, seed)

    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "metrics.csv"
        if log_path.exists():
            log_path.unlink()

    metrics: list[dict] = []
    steps = _run_stage(model, head, feats, labels_of, utts, schedule, rng, 0, 0, metrics, log_path)
    ft = schedule.fine_tune_stage()
    if ft is not None:
        _run_stage(model, head, feats, labels_of, utts, ft, rng, steps, schedule.epochs, metrics, log_path)
    model.eval()
    result = TrainResult(model, head, speakers, metrics)
    if out_dir is not None:
        result.checkpoint = save_checkpoint(out_dir / "model.ckpt", model, cfg, head,
                                            extra={"speakers": speakers, "seed": seed,
                                                   "schedule": schedule.to_dict()})
    return result


# --------------------------------------------------------------------------
# finite-difference gradient check

FAMILIES = ("stem", "res2conv", "se", "projection", "filters", "attention",
            "batchnorm", "asp", "embedding", "aam")


def param_family(name: str) -> str:
    if name.startswith("aam."):
        return "aam"
    if ".bn" in name or name.startswith("stem.bn") or ".bns." in name:
        return "batchnorm"
    if name.startswith("stem."):
        return "stem"
    if ".res2." in name:
        return "res2conv"
    if ".se." in name:
        return "se"
    if ".dgf.experts" in name:
        return "filters"
    if ".dgf.scorer" in name:
        return "attention"
    if name.startswith("asp."):
        return "asp"
    if name.startswith("head."):
        return "embedding"
    if ".proj" in name or name.startswith("mfa."):
        return "projection"
    return "other"


@dataclass
class GradEntry:
    name: str
    index: tuple[int, ...]
    family: str
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradEntry]
    rtol: float
    atol: float
    resampled: int = 0
    skipped: list[str] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def failures(self) -> list[GradEntry]:
        return [e for e in self.entries if e.rel_err > self.rtol]

    @property
    def families(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.family] = out.get(e.family, 0) + 1
        return out

    def summary(self) -> dict:
        return {"checked": len(self.entries), "max_rel_err": self.max_rel_err,
                "failures": [f"{e.name}{list(e.index)}" for e in self.failures],
                "families": self.families, "resampled": self.resampled, "skipped": self.skipped}


@contextmanager
def frozen_noise(model: DSTDNN) -> Iterator[None]:
    """Record sparse masks (and their lambda_s) on the next forward and replay them."""
    layers = model.dgf_layers()
    for layer in layers:
        layer.frozen_mask = None
        layer.record_masks = True
    try:
        yield
    finally:
        for layer in layers:
            layer.frozen_mask = None
            layer.record_masks = False


@contextmanager
def relu_patterns(model: nn.Module) -> Iterator[list[torch.Tensor]]:
    """Collect the sign pattern of every ReLU input during forwards."""
    seen: list[torch.Tensor] = []
    hooks = [m.register_forward_hook(lambda _m, inp, _out: seen.append(inp[0].detach() > 0))
             for m in model.modules() if isinstance(m, nn.ReLU)]
    try:
        yield seen
    finally:
        for h in hooks:
            h.remove()


def finite_diff_check(model: DSTDNN, head: AAMHead, x: torch.Tensor, labels: torch.Tensor,
                      n_samples: int = 200, h: float = 1e-4, rtol: float = 1e-4,
                      atol: float = 1e-6, seed: int = 0, max_resample: int = 50) -> GradCheckReport:
    """Compare autograd gradients with central differences on sampled scalars.

    Everything runs in float64 in training mode.  Sparse masks and lambda_s
    are recorded on the first forward and replayed, so the loss is a fixed
    function of the parameters.  Every parameter tensor gets at least one
    sample; the rest are spread evenly over parameter families.  A scalar
    whose perturbation flips any ReLU is redrawn.  A tensor where every draw
    flips some ReLU (early layers feed thousands of units, a few of which sit
    within h of zero) is listed in ``skipped`` and replaced by another tensor
    of the same family, or of any family once that one is exhausted.  ``rel_err`` uses
    max(|analytic|, |numeric|, atol / rtol) as denominator, which is the
    same as a relative tolerance with an absolute floor of ``atol``.
    """
    model.double().train()
    head.double().train()
    x = x.double()
    named = [(n, p) for n, p in model.named_parameters()] + \
            [("aam." + n, p) for n, p in head.named_parameters()]
    params = dict(named)
    gen = np.random.default_rng(seed)

    def loss_fn() -> torch.Tensor:
        loss, _ = aam_loss(model(x), labels, head)
        return loss

    with frozen_noise(model):
        for p in params.values():
            p.grad = None
        with relu_patterns(model) as base_pattern:
            loss = loss_fn()
        loss.backward()
        grads = {n: p.grad.detach().clone() for n, p in params.items()}

        by_family: dict[str, list[str]] = {}
        for n in params:
            by_family.setdefault(param_family(n), []).append(n)
        picks = list(params)
        fams = sorted(by_family)
        while len(picks) < n_samples:
            fam = fams[len(picks) % len(fams)]
            picks.append(by_family[fam][gen.integers(len(by_family[fam]))])

        entries: list[GradEntry] = []
        resampled = 0
        skipped: list[str] = []
        with torch.no_grad():
            while picks:
                name = picks.pop(0)
                if name in skipped:
                    # redirect to another tensor of the family, or of any family once that one is exhausted
                    others = [n for n in by_family[param_family(name)] if n not in skipped] or \
                        [n for n in params if n not in skipped]
                    if others:
                        picks.insert(0, others[int(gen.integers(len(others)))])
                    continue
                p = params[name]
                for _ in range(max_resample):
                    idx = tuple(int(gen.integers(s)) for s in p.shape)
                    orig = p[idx].item()
                    values = []
                    kink = False
                    for delta in (h, -h):
                        p[idx] = orig + delta
                        with relu_patterns(model) as pat:
                            values.append(loss_fn().item())
                        kink = kink or any(not torch.equal(a, b) for a, b in zip(pat, base_pattern))
                    p[idx] = orig
                    if not kink:
                        break
                    resampled += 1
                else:
                    skipped.append(name)
                    picks.insert(0, name)
                    continue
                numeric = (values[0] - values[1]) / (2 * h)
                analytic = grads[name][idx].item()
                denom = max(abs(analytic), abs(numeric), atol / rtol)
                entries.append(GradEntry(name, idx, param_family(name), analytic, numeric,
                                         abs(analytic - numeric) / denom))
    return GradCheckReport(entries, rtol, atol, resampled, skipped)
