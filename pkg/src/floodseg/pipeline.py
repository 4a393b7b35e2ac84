"""Training loop, optimizers, patch assembly, stitched prediction, metrics.

Training is deterministic given (seed, config, dataset): patch order is
shuffled by a seeded generator per epoch, per-patch gradients accumulate
in that order, and optimizer state updates are serialized. The elevation
input to the network is min-max normalized (per patch by default) while
the loss always sees raw elevations.
"""

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np

from . import autodiff, loss as loss_mod
from .autodiff import Tensor
from .loss import LossConfig
from .model import FloodNet, ModelConfig
from .raster import (
    Grid,
    LabelMap,
    PatchLayout,
    minmax_scale,
    reflect_pad,
    stitch_patches,
)

INPUT_MODES = ("3C", "4C", "7C")


class NumericError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-7
    batch_size: int = 4
    optimizer: str = "adam"
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    checkpoint_every: int = 0
    input_mode: str = "7C"
    normalize_scope: str = "patch"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        if self.normalize_scope not in ("patch", "region"):
            raise ValueError("normalize_scope must be 'patch' or 'region'")


def spectral_channels(mode):
    return 6 if mode == "7C" else 3


def uses_elevation(mode):
    return mode != "3C"


def build_model(mode, patch_size, blocks=3, base_channels=8, dtype="float32", **kw):
    """Model config consistent with an input mode."""
    cfg = ModelConfig(
        spectral_channels=spectral_channels(mode),
        use_elevation_path=uses_elevation(mode),
        blocks=blocks,
        base_channels=base_channels,
        patch_size=patch_size,
        dtype=dtype,
        **kw,
    )
    return FloodNet(cfg)


class PatchSet:
    """Reflect-padded views of one region, served patch by patch."""

    def __init__(self, region, mode, patch_size, dtype=np.float32, normalize_scope="patch"):
        if mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")
        self.mode = mode
        self.dtype = dtype
        self.normalize_scope = normalize_scope
        self.layout = PatchLayout.for_extent(region.width, region.height, patch_size)

        planes = [reflect_pad(region.disaster_rgb, self.layout).data]
        if mode == "7C":
            planes.append(reflect_pad(region.normal_rgb, self.layout).data)
        self._spectral = np.concatenate(planes, axis=0).astype(dtype)
        self._labels = reflect_pad(region.labels.grid, self.layout).data[0]
        self._elev_raw = reflect_pad(region.elevation.grid, self.layout).data[0].astype(
            np.float64
        )
        self._elev_norm = (
            minmax_scale(self._elev_raw).astype(dtype)
            if normalize_scope == "region"
            else None
        )

    @property
    def n_patches(self):
        return self.layout.n_patches

    def _window(self, idx):
        p = self.layout.patch_size
        if not 0 <= idx < self.layout.n_patches:
            raise ValueError(f"patch index {idx} out of range")
        r, c = divmod(idx, self.layout.cols)
        return slice(r * p, (r + 1) * p), slice(c * p, (c + 1) * p)

    def get(self, idx):
        """(spectral tensor, elevation tensor or None, gt patch, raw-h patch)."""
        si, sj = self._window(idx)
        spectral = Tensor(self._spectral[:, si, sj].copy())
        elev = None
        if uses_elevation(self.mode):
            if self._elev_norm is not None:
                e = self._elev_norm[si, sj].copy()
            else:
                e = minmax_scale(self._elev_raw[si, sj]).astype(self.dtype)
            elev = Tensor(e[None, :, :])
        gt = self._labels[si, sj].copy()
        h_raw = self._elev_raw[si, sj].copy()
        return spectral, elev, gt, h_raw


def assemble_input(region, patch_idx, mode, patch_size, dtype=np.float32,
                   normalize_scope="patch"):
    """One training sample from a region; see PatchSet for the batch path."""
    return PatchSet(region, mode, patch_size, dtype, normalize_scope).get(patch_idx)


# ---------------------------------------------------------------------------
# optimizers


def sgd_step(params, lr):
    """Vanilla gradient descent on every parameter carrying a gradient."""
    for t in params.values():
        if t.grad is not None:
            t.data -= lr * t.grad.astype(t.data.dtype)


def adam_init(params):
    return {
        "t": 0,
        "m": {n: np.zeros_like(t.data, dtype=np.float64) for n, t in params.items()},
        "v": {n: np.zeros_like(t.data, dtype=np.float64) for n, t in params.items()},
    }


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One standard Adam update; state carries first/second moments."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        g = g.astype(np.float64)
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= step.astype(p.data.dtype)


class Optimizer:
    def __init__(self, kind, params, lr):
        self.kind = kind
        self.params = params
        self.lr = lr
        self.state = adam_init(params) if kind == "adam" else None

    def step(self):
        if self.kind == "adam":
            adam_step(self.params, self.state, self.lr)
        else:
            sgd_step(self.params, self.lr)


# ---------------------------------------------------------------------------
# training


def train(model, train_regions, cfg, ckpt_dir=None, start_epoch=0, on_epoch=None):
    """Train in place; returns the loss history as [(epoch, mean_loss)].

    Patches with no labeled pixel are skipped under the pure
    cross-entropy scheme (they contribute no gradient). A non-finite
    loss aborts with NumericError. With ckpt_dir set, checkpoints are
    written every cfg.checkpoint_every epochs and at the end.
    """
    if not train_regions:
        raise ValueError("need at least one training region")
    sets = [
        PatchSet(r, cfg.input_mode, model.config.patch_size,
                 model.config.np_dtype, cfg.normalize_scope)
        for r in train_regions
    ]
    items = [(si, pi) for si, s in enumerate(sets) for pi in range(s.n_patches)]
    params = model.parameters()
    opt = Optimizer(cfg.optimizer, params, cfg.lr)

    history = []
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = [items[i] for i in rng.permutation(len(items))]
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            autodiff.zero_grads(params.values())
            got_grad = False
            for si, pi in batch:
                spectral, elev, gt, h_raw = sets[si].get(pi)
                if cfg.loss.scheme == "ce" and not (gt != 0).any():
                    continue
                scores = model.forward(spectral, elev)
                l = loss_mod.total_loss(scores, gt, h_raw, cfg.loss)
                value = l.item()
                if not np.isfinite(value):
                    raise NumericError(
                        f"non-finite loss {value} at epoch {epoch} "
                        f"(region {si}, patch {pi})"
                    )
                autodiff.backward(l)
                losses.append(value)
                got_grad = True
            if got_grad:
                opt.step()
        mean = float(np.mean(losses)) if losses else 0.0
        history.append((epoch, mean))
        if on_epoch is not None:
            on_epoch(epoch, mean)
        if ckpt_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(model, f"{ckpt_dir}/epoch_{epoch:04d}.evaw", epoch)
    return history


def save_checkpoint(model, path, epoch):
    """Write parameters plus epoch and architecture metadata."""
    autodiff.save_params(
        path,
        {
            **model.parameters(),
            "__epoch__": np.array([epoch], dtype=np.float32),
            "__config_v1__": model.config.to_array(),
        },
    )


def load_checkpoint(model, path):
    """Restore parameters into an existing model; returns the stored epoch."""
    state = autodiff.load_params(path)
    epoch = int(state.pop("__epoch__", np.zeros(1))[0])
    state.pop("__config_v1__", None)
    model.load_state(state)
    return epoch


def load_model_checkpoint(path, dtype="float32"):
    """Rebuild the architecture recorded in a checkpoint; returns (model, epoch)."""
    state = autodiff.load_params(path)
    epoch = int(state.pop("__epoch__", np.zeros(1))[0])
    meta = state.pop("__config_v1__", None)
    if meta is None:
        raise ValueError(f"checkpoint {path} carries no model config")
    model = FloodNet(ModelConfig.from_array(meta, dtype))
    model.load_state(state)
    return model, epoch


def loss_csv(history):
    lines = ["epoch,mean_loss"]
    lines += [f"{e},{m!r}" for e, m in history]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# prediction and evaluation


def predict_region(model, region, mode, normalize_scope="patch", threads=1):
    """Patchwise forward, stitched back to region extent.

    Returns (probability Grid with channels (p_dry, p_flood), hard
    LabelMap by the p_flood >= 0.5 rule).
    """
    ps = PatchSet(region, mode, model.config.patch_size,
                  model.config.np_dtype, normalize_scope)

    def run(idx):
        spectral, elev, _, _ = ps.get(idx)
        scores = model.forward(spectral, elev)
        sp = loss_mod.ScorePair(s_dry=scores.data[0], s_flood=scores.data[1])
        pf = sp.p_flood()
        return Grid(np.stack([1.0 - pf, pf]).astype(np.float32))

    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as ex:
            prob_patches = list(ex.map(run, range(ps.n_patches)))
    else:
        prob_patches = [run(i) for i in range(ps.n_patches)]

    prob = stitch_patches(prob_patches, ps.layout)
    hard = LabelMap(np.where(prob.data[1] >= 0.5, 1, -1).astype(np.int8))
    return prob, hard


@dataclass
class ClassMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float

    def to_json(self):
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
        }


@dataclass
class EvalReport:
    dry: ClassMetrics
    flood: ClassMetrics
    tp_flood: int
    fp_flood: int
    fn_flood: int
    tn_flood: int
    labeled: int
    violation_rate: float | None = None

    def to_json(self):
        out = {
            "labeled": self.labeled,
            "confusion": {
                "tp_flood": self.tp_flood,
                "fp_flood": self.fp_flood,
                "fn_flood": self.fn_flood,
                "tn_flood": self.tn_flood,
            },
            "dry": self.dry.to_json(),
            "flood": self.flood.to_json(),
        }
        if self.violation_rate is not None:
            out["violation_rate"] = self.violation_rate
        return out


def _metrics(tp, fp, fn, tn):
    n = tp + fp + fn + tn
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return ClassMetrics(accuracy=(tp + tn) / n, precision=prec, recall=rec, f1=f1)


def evaluate(pred, gt, elevation=None, border_pairs="include"):
    """Confusion-matrix measures over labeled pixels, per class context.

    Passing the elevation map adds the physics violation rate to the
    report. Errors out when no pixel is labeled.
    """
    predv = pred.values if isinstance(pred, LabelMap) else np.asarray(pred)
    gtv = gt.values if isinstance(gt, LabelMap) else np.asarray(gt)
    if predv.shape != gtv.shape:
        raise ValueError("prediction and ground truth dims differ")
    labeled = gtv != 0
    n = int(labeled.sum())
    if n == 0:
        raise ValueError("no labeled pixels to evaluate")
    if not np.isin(predv[labeled], (-1, 1)).all():
        raise ValueError("prediction must be hard labels in {-1, +1}")

    pf = predv == 1
    gf = gtv == 1
    tp = int((pf & gf & labeled).sum())
    fp = int((pf & ~gf & labeled).sum())
    fn = int((~pf & gf & labeled).sum())
    tn = n - tp - fp - fn

    report = EvalReport(
        dry=_metrics(tn, fn, fp, tp),  # dry-positive swaps the matrix
        flood=_metrics(tp, fp, fn, tn),
        tp_flood=tp,
        fp_flood=fp,
        fn_flood=fn,
        tn_flood=tn,
        labeled=n,
    )
    if elevation is not None:
        report.violation_rate = loss_mod.violation_rate(
            predv, gtv, elevation, border_pairs
        )
    return report
