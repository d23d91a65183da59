"""Training, evaluation, anytime inference and profiling.

The paper-scale defaults (256x512 crops, batch 6, Adam with betas
0.9/0.999, lr 5e-4 halved every 200 epochs) live in ``RunConfig``; the
desk-scale profile shrinks crops to 64x128 with batch 2 so the whole
pipeline runs on a laptop CPU. Config files are flat ``key = value``
text with one line per field.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as M
from .data import (CheckpointMeta, SceneParams, SyntheticSample,
                   generate_split, load_checkpoint, load_split,
                   save_checkpoint)
from .diffops import (ShapeError, Tensor, flop_counts, no_grad,
                      reset_op_counts, upsample_bilinear)
from .dispnet import STAGE_SCALES
from .network import SemStereoNet
from .objective import ClassStats, LossWeights, class_weights, multi_task_loss
from .semnet import predict_classes


class NumericFailure(RuntimeError):
    """Training hit a non-finite value; carries the first offending tensor."""

    def __init__(self, tensor_name: str):
        super().__init__(f"non-finite values in {tensor_name}")
        self.tensor_name = tensor_name


@dataclass
class RunConfig:
    # model
    c: int = 8
    n_classes: int = 19
    seed: int = 0
    # optimization
    crop_height: int = 256
    crop_width: int = 512
    batch_size: int = 6
    lr: float = 5e-4
    lr_halve_epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 500
    checkpoint_every: int = 0
    # loss
    w_stage1: float = 0.25
    w_stage2: float = 0.5
    w_stage3: float = 1.0
    w_disparity: float = 1.0
    w_semantic: float = 2.0
    w_refined: float = 2.0
    gamma: float = 0.1
    class_k: float = 2.0
    ignore_id: int = 255
    # inference
    stage_stop: int = 3
    refine: bool = True
    # data: a dataset folder, or generator parameters when data_root is empty
    data_root: str = ""
    data_seed: int = 100
    gen_count: int = 8
    gen_height: int = 64
    gen_width: int = 128
    gen_objects: int = 4
    gen_max_disp: float = 48.0
    gen_bg_lo: float = 2.0
    gen_bg_hi: float = 10.0

    def loss_weights(self) -> LossWeights:
        return LossWeights(stage=(self.w_stage1, self.w_stage2, self.w_stage3),
                           disparity=self.w_disparity,
                           semantic=self.w_semantic,
                           refined=self.w_refined,
                           gamma=self.gamma, k=self.class_k)

    def scene_params(self) -> SceneParams:
        return SceneParams(height=self.gen_height, width=self.gen_width,
                           n_objects=self.gen_objects,
                           max_disp=self.gen_max_disp,
                           n_classes=self.n_classes,
                           bg_disp=(self.gen_bg_lo, self.gen_bg_hi))


def desk_profile(**overrides) -> RunConfig:
    base = dict(c=4, n_classes=3, crop_height=64, crop_width=128,
                batch_size=2)
    base.update(overrides)
    return RunConfig(**base)


def paper_profile(**overrides) -> RunConfig:
    return RunConfig(**overrides)


def lr_at(config: RunConfig, epoch: int) -> float:
    """Initial rate halved every ``lr_halve_epochs`` epochs."""
    return config.lr * 0.5 ** (epoch // config.lr_halve_epochs)


# ---------------------------------------------------------------------------
# flat key = value config files

def config_to_file(config: RunConfig, path) -> None:
    with open(path, "w") as f:
        for field in dataclasses.fields(RunConfig):
            f.write(f"{field.name} = {getattr(config, field.name)}\n")


def _parse_field(name: str, raw: str):
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    if name not in types:
        raise ValueError(f"unknown config key {name!r}")
    kind = types[name]
    raw = raw.strip()
    if kind == "bool" or kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"config key {name}: {raw!r} is not a boolean")
    if kind == "int" or kind is int:
        return int(raw)
    if kind == "float" or kind is float:
        return float(raw)
    return raw


def config_from_file(path) -> RunConfig:
    values = {}
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected 'key = value'")
            key, raw = line.split("=", 1)
            key = key.strip()
            values[key] = _parse_field(key, raw)
    return dataclasses.replace(RunConfig(), **values)


def apply_overrides(config: RunConfig, overrides: dict) -> RunConfig:
    parsed = {k: _parse_field(k, str(v)) for k, v in overrides.items()}
    return dataclasses.replace(config, **parsed)


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """First/second-moment optimizer with bias correction."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.params[0].dtype.type(self.beta1), \
            self.params[0].dtype.type(self.beta2)
        corr1 = 1 - self.beta1 ** self.t
        corr2 = 1 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / p.dtype.type(corr1)
            vhat = v / p.dtype.type(corr2)
            p.data -= p.dtype.type(lr) * mhat / (np.sqrt(vhat)
                                                 + p.dtype.type(self.eps))


# ---------------------------------------------------------------------------
# training

def normalization_stats(samples) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std over both views of the training set."""
    pixels = np.concatenate(
        [s.left.reshape(3, -1) for s in samples]
        + [s.right.reshape(3, -1) for s in samples], axis=1)
    mean = pixels.mean(axis=1)
    std = np.maximum(pixels.std(axis=1), 1e-3)
    return mean.astype(np.float32), std.astype(np.float32)


def class_statistics(samples, n_classes: int, ignore_id: int) -> ClassStats:
    counts = np.zeros(n_classes, dtype=np.int64)
    total = 0
    for s in samples:
        labeled = s.semantics != ignore_id
        total += int(labeled.size)
        counts += np.bincount(s.semantics[labeled].ravel(),
                              minlength=n_classes)[:n_classes]
    return ClassStats(counts / max(total, 1))


def _normalize(img, mean, std):
    return ((img - mean[:, None, None]) / std[:, None, None]).astype(np.float32)


def load_training_samples(config: RunConfig) -> list:
    if config.data_root:
        return load_split(config.data_root, "train")
    return generate_split(config.scene_params(), config.gen_count,
                          config.data_seed)


def _first_nonfinite(outputs, model) -> str:
    for i, out in enumerate(outputs, 1):
        for label, t in (("disparity", out.disparity.disparity),
                         ("logits", out.logits.scores),
                         ("refined", out.refined)):
            if t is not None and not np.all(np.isfinite(t.data)):
                return f"stage{i}.{label}"
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            return name
    return "loss"


@dataclass
class TrainResult:
    model: SemStereoNet
    meta: CheckpointMeta
    checkpoint_path: str | None
    curves: list


def train(config: RunConfig, out_dir=None, log=None) -> TrainResult:
    """Seeded full training loop; bitwise reproducible for a fixed
    (seed, config, backend) triple."""
    samples = load_training_samples(config)
    n = len(samples)
    ch, cw = config.crop_height, config.crop_width
    if ch % 32 or cw % 32:
        raise ValueError(f"crop {ch}x{cw} must be divisible by 32")
    for s in samples:
        if s.left.shape[1] < ch or s.left.shape[2] < cw:
            raise ValueError(f"sample {s.left.shape[1]}x{s.left.shape[2]} "
                             f"smaller than crop {ch}x{cw}")

    mean, std = normalization_stats(samples)
    weights = config.loss_weights()
    cls_w = class_weights(
        class_statistics(samples, config.n_classes, config.ignore_id),
        config.class_k)

    model = SemStereoNet(config.c, config.n_classes, seed=config.seed)
    model.train()
    adam = Adam(model.parameters(), config.beta1, config.beta2,
                config.adam_eps)
    order_rng = np.random.default_rng(config.seed + 1)

    curves = []
    queue: list[int] = []
    for step in range(1, config.steps + 1):
        batch_idx = []
        while len(batch_idx) < config.batch_size:
            if not queue:
                queue = list(order_rng.permutation(n))
            batch_idx.append(queue.pop(0))

        lefts, rights, disps, sems = [], [], [], []
        for i in batch_idx:
            s = samples[i]
            hh, ww = s.left.shape[1], s.left.shape[2]
            oy = int(order_rng.integers(0, hh - ch + 1)) if hh > ch else 0
            ox = int(order_rng.integers(0, ww - cw + 1)) if ww > cw else 0
            lefts.append(_normalize(s.left[:, oy:oy + ch, ox:ox + cw], mean, std))
            rights.append(_normalize(s.right[:, oy:oy + ch, ox:ox + cw], mean, std))
            disps.append(s.disparity[:, oy:oy + ch, ox:ox + cw])
            sems.append(s.semantics[oy:oy + ch, ox:ox + cw])

        left_t = Tensor(np.stack(lefts))
        right_t = Tensor(np.stack(rights))
        disp_gt = np.stack(disps).astype(np.float32)
        disp_valid = disp_gt > 0
        sem_gt = np.stack(sems)

        epoch = (step * config.batch_size) // n
        lr = lr_at(config, epoch)

        outputs = model.forward(left_t, right_t, stage_stop=3,
                                refine=config.refine)
        loss, parts = multi_task_loss(outputs, disp_gt, disp_valid, sem_gt,
                                      weights, cls_w, config.ignore_id)
        if not np.isfinite(loss.data):
            raise NumericFailure(_first_nonfinite(outputs, model))
        loss.backward()
        adam.step(lr)
        model.zero_grad()

        row = {"step": step, "epoch": epoch, "lr": lr,
               "total": float(loss.data), **parts}
        curves.append(row)
        if log is not None and (step % 50 == 0 or step == 1):
            log(f"step {step}/{config.steps} lr {lr:.2e} "
                f"loss {float(loss.data):.4f}")

        if (out_dir is not None and config.checkpoint_every
                and step % config.checkpoint_every == 0):
            meta = CheckpointMeta(config.c, config.n_classes, step, mean, std)
            save_checkpoint(Path(out_dir) / f"model-{step:06d}.ckpt", meta,
                            model.state())

    meta = CheckpointMeta(config.c, config.n_classes, config.steps, mean, std)
    ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = str(out_dir / "model.ckpt")
        save_checkpoint(ckpt_path, meta, model.state())
        with open(out_dir / "curves.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(curves[0].keys()))
            writer.writeheader()
            writer.writerows(curves)
    return TrainResult(model, meta, ckpt_path, curves)


def model_from_checkpoint(path) -> tuple[SemStereoNet, CheckpointMeta]:
    meta, tensors = load_checkpoint(path)
    model = SemStereoNet(meta.channel_factor, meta.n_classes, seed=0)
    model.load_state(tensors)
    return model, meta


# ---------------------------------------------------------------------------
# inference

@dataclass
class InferResult:
    disparity: np.ndarray          # H x W float32, full-resolution px
    classes: np.ndarray            # H x W int64
    timings: dict                  # seconds per stage scope
    outputs: list                  # raw per-stage outputs


def infer(model: SemStereoNet, meta: CheckpointMeta, left, right,
          stage_stop: int = 3, refine: bool = True) -> InferResult:
    """Run the pyramid up to ``stage_stop`` and upsample its estimate."""
    h, w = left.shape[1], left.shape[2]
    if h % 32 or w % 32:
        raise ShapeError(f"infer: input {h}x{w} not divisible by 32; pad or "
                         f"crop first")
    left_t = Tensor(_normalize(left, meta.norm_mean, meta.norm_std)[None])
    right_t = Tensor(_normalize(right, meta.norm_mean, meta.norm_std)[None])
    timings: dict = {}
    model.eval()
    with no_grad():
        outputs = model.forward(left_t, right_t, stage_stop=stage_stop,
                                refine=refine, timings=timings)
        stop = outputs[-1]
        dmap = stop.refined if (refine and stop.refined is not None) \
            else stop.disparity.disparity
        full = upsample_bilinear(dmap, stop.scale).data * stop.scale
    classes = predict_classes(stop.logits)
    classes = np.repeat(np.repeat(classes, stop.scale, axis=1),
                        stop.scale, axis=2)
    return InferResult(disparity=full[0, 0].astype(np.float32),
                       classes=classes[0], timings=timings, outputs=outputs)


# ---------------------------------------------------------------------------
# evaluation

def evaluate(model: SemStereoNet, meta: CheckpointMeta, samples,
             stage_stop: int = 3, refine: bool = True) -> dict:
    """Image-averaged metrics over a sample list."""
    epes, d1s, mious, paccs = [], [], [], []
    for s in samples:
        res = infer(model, meta, s.left, s.right, stage_stop, refine)
        valid = s.valid_mask()[0]
        e = M.epe(res.disparity, s.disparity[0], valid)
        d = M.d1_all(res.disparity, s.disparity[0], valid)
        mi = M.miou(res.classes, s.semantics, meta.n_classes)
        pa = M.pixel_acc(res.classes, s.semantics)
        for acc, val in ((epes, e), (d1s, d), (mious, mi), (paccs, pa)):
            if val is not None:
                acc.append(val)

    def agg(vals):
        return float(np.mean(vals)) if vals else None

    return {"epe": agg(epes), "d1_all": agg(d1s), "miou": agg(mious),
            "pacc": agg(paccs), "images": len(samples),
            "stage_stop": stage_stop, "refine": refine}


def stage_disparity_epes(model: SemStereoNet, meta: CheckpointMeta, samples,
                         refine: bool = True) -> list:
    """Full-resolution EPE of each stage's estimate, one forward per pair."""
    sums = np.zeros(3)
    counts = np.zeros(3)
    model.eval()
    for s in samples:
        left_t = Tensor(_normalize(s.left, meta.norm_mean, meta.norm_std)[None])
        right_t = Tensor(_normalize(s.right, meta.norm_mean,
                                    meta.norm_std)[None])
        with no_grad():
            outputs = model.forward(left_t, right_t, stage_stop=3,
                                    refine=refine)
            for k, out in enumerate(outputs):
                dmap = out.refined if (refine and out.refined is not None) \
                    else out.disparity.disparity
                full = upsample_bilinear(dmap, out.scale).data * out.scale
                valid = s.valid_mask()[0]
                err = M.epe(full[0, 0], s.disparity[0], valid)
                if err is not None:
                    sums[k] += err
                    counts[k] += 1
    return [float(sums[k] / counts[k]) if counts[k] else None
            for k in range(3)]


def write_report(report: dict, out_dir, name: str = "report") -> None:
    """Flat key=value text plus a machine-readable CSV table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{name}.txt", "w") as f:
        for key, value in report.items():
            f.write(f"{key} = {'n/a' if value is None else value}\n")
    with open(out_dir / f"{name}.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for key, value in report.items():
            writer.writerow([key, "n/a" if value is None else value])


# ---------------------------------------------------------------------------
# profiling

def analytic_flops(model: SemStereoNet, height: int, width: int,
                   stage_stop: int = 3, refine: bool = True,
                   seed: int = 0) -> dict:
    """Per-scope forward FLOPs from one counted inference pass."""
    rng = np.random.default_rng(seed)
    left = Tensor(rng.standard_normal((1, 3, height, width)).astype(np.float32))
    right = Tensor(rng.standard_normal((1, 3, height, width)).astype(np.float32))
    model.eval()
    reset_op_counts()
    with no_grad():
        model.forward(left, right, stage_stop=stage_stop, refine=refine)
    flops = flop_counts()
    reset_op_counts()
    flops.pop("", None)
    flops["total"] = sum(flops.values())
    return flops


def parameter_report(model: SemStereoNet) -> dict:
    return {"encoder": model.encoder.parameter_total(),
            "dispnet": model.dispnet.parameter_total(),
            "semnet": model.semnet.parameter_total(),
            "synergy": model.synergy.parameter_total(),
            "total": model.parameter_total()}


def bench(model: SemStereoNet, meta: CheckpointMeta, height: int, width: int,
          repetitions: int, warmup: int = 3, stage_stop: int = 3,
          refine: bool = True, seed: int = 0) -> dict:
    """Median/p95 per-stage latency plus FLOP and parameter counts."""
    if height % 32 or width % 32:
        raise ValueError(f"bench: input {height}x{width} not divisible by 32")
    if repetitions < 1:
        raise ValueError("bench: repetitions must be >= 1")
    rng = np.random.default_rng(seed)
    left = (rng.random((3, height, width)) * 255).astype(np.float32)
    right = (rng.random((3, height, width)) * 255).astype(np.float32)
    model.eval()

    per_label: dict[str, list] = {}
    totals = []
    for rep in range(warmup + repetitions):
        t0 = time.perf_counter()
        res = infer(model, meta, left, right, stage_stop, refine)
        total = time.perf_counter() - t0
        if rep < warmup:
            continue
        totals.append(total)
        for label, dt in res.timings.items():
            per_label.setdefault(label, []).append(dt)

    report = {"input": f"{height}x{width}", "repetitions": repetitions,
              "warmup": warmup, "stage_stop": stage_stop, "refine": refine}
    if repetitions < 2:
        report["warning"] = ("insufficient samples for stable percentiles; "
                             "use repetitions >= 2")
    for label in sorted(per_label):
        times = np.asarray(per_label[label])
        report[f"{label}_median_ms"] = float(np.median(times) * 1e3)
        report[f"{label}_p95_ms"] = float(np.percentile(times, 95) * 1e3)
    report["total_median_ms"] = float(np.median(totals) * 1e3)
    report["total_p95_ms"] = float(np.percentile(totals, 95) * 1e3)
    for scope, flops in analytic_flops(model, height, width, stage_stop,
                                       refine).items():
        report[f"flops_{scope}"] = flops
    for module, count in parameter_report(model).items():
        report[f"params_{module}"] = count
    return report
