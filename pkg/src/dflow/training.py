"""Optimisation loop, gradient checking, evaluation, and checkpointing.

Training is deterministic end to end: the window order for epoch ``e`` is a
fresh permutation seeded by (seed, e), so resuming from a checkpoint replays
exactly the schedule an uninterrupted run would have used. Divergence (a
non-finite loss) aborts immediately with a diagnostic rather than training on.

Checkpoint format: magic ``DFLW``, little-endian u32 version, u64 header
length, a JSON header (configs, step counter, curve records, tensor
directory), then the tensors as raw little-endian float64 in directory order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .losses import bce_loss, dice_coefficient, focal_loss, silhouette_score
from .network import DFlowConfig, build_dflow
from .tensor import GradTape, add, backward, scale

__all__ = [
    "TrainConfig",
    "CurveRecord",
    "TrainRun",
    "EvalReport",
    "GradCheckReport",
    "DivergenceError",
    "CheckpointError",
    "train",
    "resume",
    "evaluate",
    "gradcheck",
    "save_checkpoint",
    "load_checkpoint",
    "write_curve_csv",
]

CHECKPOINT_MAGIC = b"DFLW"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "bce"            # "bce" | "focal"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    optimizer: str = "adam"      # "adam" | "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 500
    batch_size: int = 1
    seed: int = 0
    eval_interval: int = 50

    def __post_init__(self):
        if self.loss not in ("bce", "focal"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0.0:
            raise ValueError("lr must be >= 0")
        if self.steps < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise ValueError("steps, batch_size and eval_interval must be >= 1")

    def to_dict(self):
        return asdict(self)

    @staticmethod
    def from_dict(d):
        return TrainConfig(**d)


@dataclass
class CurveRecord:
    step: int
    train_loss: float
    val_loss: float | None = None
    val_dice: float | None = None


@dataclass
class TrainRun:
    model: object
    config: TrainConfig
    step: int = 0
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)


@dataclass
class EvalReport:
    mean_dice: float
    mean_silhouette: float
    n_windows: int
    rows: list  # (source_id, final_frame_index, dice, silhouette)


def _loss_fn(config):
    if config.loss == "bce":
        return bce_loss
    return lambda p, y: focal_loss(p, y, alpha=config.focal_alpha,
                                   gamma=config.focal_gamma)


def _epoch_order(seed, epoch, n):
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    return rng.permutation(n)


def _window_at(windows, seed, position):
    n = len(windows)
    return windows[_epoch_order(seed, position // n, n)[position % n]]


def _val_metrics(model, val_windows, loss_fn):
    losses, dices = [], []
    for seq in val_windows:
        p = model.forward_window(seq.frames)
        losses.append(loss_fn(p, seq.label).item())
        dices.append(dice_coefficient((p.data > 0.5).astype(np.float64), seq.label))
    return float(np.mean(losses)), float(np.mean(dices))


def _train_loop(run, data):
    config = run.config
    windows = data.get("train", [])
    if not windows:
        raise ValueError("training requires a non-empty train split")
    val_windows = data.get("val", [])
    loss_fn = _loss_fn(config)
    params = run.model.parameters()
    if config.optimizer == "adam":
        for name, p in params.items():
            run.adam_m.setdefault(name, np.zeros_like(p.data))
            run.adam_v.setdefault(name, np.zeros_like(p.data))

    while run.step < config.steps:
        step = run.step + 1
        base = (step - 1) * config.batch_size
        batch = [_window_at(windows, config.seed, base + i)
                 for i in range(config.batch_size)]
        with GradTape() as tape:
            loss = None
            for seq in batch:
                term = loss_fn(run.model.forward_window(seq.frames), seq.label)
                loss = term if loss is None else add(loss, term)
            if config.batch_size > 1:
                loss = scale(loss, 1.0 / config.batch_size)
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise DivergenceError(
                f"non-finite training loss {loss_value!r} at step {step} "
                f"(seed {config.seed}, lr {config.lr})")
        backward(tape, loss)

        if config.optimizer == "sgd":
            for p in params.values():
                p.data -= config.lr * p.grad
        else:
            b1, b2, eps = config.beta1, config.beta2, config.adam_eps
            for name, p in params.items():
                m = run.adam_m[name] = b1 * run.adam_m[name] + (1 - b1) * p.grad
                v = run.adam_v[name] = b2 * run.adam_v[name] + (1 - b2) * p.grad ** 2
                m_hat = m / (1.0 - b1 ** step)
                v_hat = v / (1.0 - b2 ** step)
                p.data -= config.lr * m_hat / (np.sqrt(v_hat) + eps)

        record = CurveRecord(step=step, train_loss=loss_value)
        if val_windows and (step % config.eval_interval == 0 or step == config.steps):
            record.val_loss, record.val_dice = _val_metrics(run.model, val_windows, loss_fn)
        run.curve.append(record)
        run.step = step
    return run


def train(model, data, config):
    """Run ``config.steps`` optimiser updates over the train split of ``data``
    (a dict split -> list[FrameSequence]); returns the TrainRun with its
    learning curve."""
    return _train_loop(TrainRun(model=model, config=config), data)


def resume(run, data):
    """Continue a loaded TrainRun until its configured step budget."""
    return _train_loop(run, data)


def evaluate(model, data, split):
    """Mean Dice and silhouette over every window of a split (side-effect
    free; the silhouette uses each window's final RGB frame as features)."""
    windows = data.get(split, [])
    if not windows:
        raise ValueError(f"split {split!r} is empty")
    rows = []
    for seq in windows:
        p = model.predict(seq.frames)
        binary = (p > 0.5).astype(np.float64)
        d = dice_coefficient(binary, seq.label)
        s = silhouette_score(binary, seq.frames[-1].pixels, seed=0)
        rows.append((seq.source_id, seq.frame_indices[-1] if seq.frame_indices else -1, d, s))
    return EvalReport(
        mean_dice=float(np.mean([r[2] for r in rows])),
        mean_silhouette=float(np.mean([r[3] for r in rows])),
        n_windows=len(rows),
        rows=rows,
    )


# --- gradient checking ---------------------------------------------------------


@dataclass
class GradCheckReport:
    per_tensor: dict       # name -> max relative error
    tolerance: float
    passed: bool

    def __str__(self):
        lines = [f"{'tensor':<24} max_rel_err"]
        for name, err in self.per_tensor.items():
            lines.append(f"{name:<24} {err:.3e}")
        lines.append(f"tolerance {self.tolerance:.1e}: "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def _relative_error(a, f):
    return abs(a - f) / max(abs(a), abs(f), 1e-5)


def gradcheck(model, sample, loss="bce", tolerance=1e-4, h=1e-6):
    """Compare every parameter's analytic gradient against central finite
    differences on one sample window. Restricted to small models (<= 5000
    parameters) since each entry costs two forward passes. ``loss`` is
    "bce", "focal", or any callable (probs, label) -> scalar tensor."""
    params = model.parameters()
    total = sum(p.data.size for p in params.values())
    if total > 5000:
        raise ValueError(f"model has {total} parameters; gradcheck is capped at 5000")
    if callable(loss):
        loss_fn = loss
    else:
        loss_fn = bce_loss if loss == "bce" else focal_loss

    def forward_loss():
        return loss_fn(model.forward_window(sample.frames), sample.label).item()

    with GradTape() as tape:
        loss_t = loss_fn(model.forward_window(sample.frames), sample.label)
    backward(tape, loss_t)

    report = {}
    for name, p in params.items():
        grad = p.grad
        if grad is None or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite analytic gradient for {name}")
        flat = p.data.reshape(-1)
        worst = 0.0
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = forward_loss()
            flat[idx] = orig - h
            down = forward_loss()
            flat[idx] = orig
            fd = (up - down) / (2.0 * h)
            worst = max(worst, _relative_error(grad.reshape(-1)[idx], fd))
        report[name] = worst
    passed = all(err < tolerance for err in report.values())
    return GradCheckReport(per_tensor=report, tolerance=tolerance, passed=passed)


# --- persistence -----------------------------------------------------------------


def _named_tensors(run):
    """Checkpointed tensors in a deterministic order: parameters sorted by
    name, then Adam moments."""
    out = []
    params = run.model.parameters()
    for name in sorted(params):
        out.append((f"param.{name}", params[name].data))
    for name in sorted(run.adam_m):
        out.append((f"adam.m.{name}", run.adam_m[name]))
    for name in sorted(run.adam_v):
        out.append((f"adam.v.{name}", run.adam_v[name]))
    return out

def save_checkpoint(run, path):
    """Serialise a TrainRun; the round trip is bit-exact for every tensor,
    counter, and curve record."""
    tensors = _named_tensors(run)
    directory, offset = [], 0
    for name, arr in tensors:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "model_config": run.model.config.to_dict(),
        "train_config": run.config.to_dict(),
        "step": run.step,
        "curve": [[r.step, r.train_loss, r.val_loss, r.val_dice] for r in run.curve],
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Rebuild a TrainRun (model, optimiser state, curve) from disk."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}; not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}")
    data_start = 16 + hlen

    model = build_dflow(DFlowConfig.from_dict(header["model_config"]), seed=0)
    config = TrainConfig.from_dict(header["train_config"])
    run = TrainRun(model=model, config=config, step=header["step"])
    run.curve = [CurveRecord(step=s, train_loss=t, val_loss=v, val_dice=d)
                 for s, t, v, d in header["curve"]]

    params = model.parameters()
    for entry in header["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        count = int(np.prod(shape)) if shape else 1
        start = data_start + offset
        if start + count * 8 > len(blob):
            raise CheckpointError(f"truncated checkpoint: tensor {name} out of range")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        arr = arr.reshape(shape).astype(np.float64)
        if name.startswith("param."):
            key = name[len("param."):]
            if key not in params:
                raise CheckpointError(f"checkpoint tensor {name} unknown to this model")
            if params[key].data.shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: file {arr.shape}, "
                    f"model {params[key].data.shape}")
            params[key].data = arr
        elif name.startswith("adam.m."):
            run.adam_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            run.adam_v[name[len("adam.v."):]] = arr
        else:
            raise CheckpointError(f"unknown tensor kind {name!r}")
    return run


def write_curve_csv(curve, path):
    """Learning curve CSV: ``step,train_loss,val_loss,val_dice`` with empty
    validation fields on non-eval steps."""
    lines = ["step,train_loss,val_loss,val_dice"]
    for r in curve:
        val_loss = "" if r.val_loss is None else repr(r.val_loss)
        val_dice = "" if r.val_dice is None else repr(r.val_dice)
        lines.append(f"{r.step},{r.train_loss!r},{val_loss},{val_dice}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
