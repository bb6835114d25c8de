"""Teacher-student training.

The teacher is trained by gradient descent on the supervised loss plus the
consistency terms; the student is never touched by the optimizer and only
follows the teacher through an exponential moving average whose decay ramps
up with the iteration count.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import (
    NetworkConfig,
    build_network,
    load_parameters,
    load_tensors,
    probabilities,
    save_tensors,
    snapshot_parameters,
)
from .losses import (
    CosineForm,
    LossConfig,
    make_spectral_mask,
    semi_supervised_loss,
    total_loss,
    total_supervised_loss,
)
from .preprocess import (
    AhaParams,
    Patch,
    adaptive_histogram_attention,
    case_from_manifest,
    grid_positions,
    standardize,
)
from .volume_core import DatasetManifest, LabelMask, Volume

log = logging.getLogger(__name__)

TEACHER_INPUTS = ("raw", "vessel_like")


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 100
    batch_size: int = 1
    patch_size: int = 32  # desk default; the full-scale setting is 128
    stride: int | None = None  # patch extraction stride, default patch_size // 2
    learning_rate: float = 1e-3
    lr_step_epochs: int = 10
    lr_factor: float = 0.1
    ema_base_decay: float = 0.999
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    teacher_input: str = "raw"
    # "auto": student when the semi-supervised term is on, teacher otherwise
    inference_network: str = "auto"
    augment: bool = True
    steps_per_epoch: int | None = None  # default: one pass over the labeled patches
    aha: AhaParams = field(default_factory=AhaParams)
    spacing: float = 0.35

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if isinstance(self.network, dict):
            object.__setattr__(self, "network", NetworkConfig(**self.network))
        if isinstance(self.aha, dict):
            object.__setattr__(self, "aha", AhaParams(**self.aha))
        if self.network.patch_size != self.patch_size:
            object.__setattr__(self, "network", dataclasses.replace(self.network, patch_size=self.patch_size))
        for name in ("epochs", "batch_size", "patch_size", "learning_rate", "lr_step_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must lie in (0, 1)")
        if not 0 < self.ema_base_decay < 1:
            raise ValueError("ema_base_decay must lie in (0, 1)")
        if self.teacher_input not in TEACHER_INPUTS:
            raise ValueError(f"teacher_input must be one of {TEACHER_INPUTS}")
        if self.inference_network not in ("auto", "student", "teacher"):
            raise ValueError("inference_network must be auto, student or teacher")

    @property
    def semi_enabled(self) -> bool:
        return self.loss.semi_weight > 0

    @property
    def patch_stride(self) -> int:
        return self.stride or self.patch_size // 2

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"] = self.loss.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainerConfig":
        return cls(**d)


def fork_rng(seed: int, name: str) -> np.random.Generator:
    """Named child generator of the run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


# ---------------------------------------------------------------------------
# EMA


def ema_decay(iteration: int, base_decay: float = 0.999) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return min(1.0 - 1.0 / (iteration * 10 + 1), base_decay)


@dataclass
class TeacherStudentState:
    teacher: nn.Module
    student: nn.Module
    optimizer: torch.optim.Optimizer
    iteration: int = 0
    epoch: int = 0
    best_val: float = -1.0


def make_state(cfg: TrainerConfig, teacher: nn.Module | None = None) -> TeacherStudentState:
    teacher = teacher if teacher is not None else build_network(cfg.network, seed=cfg.seed)
    student = copy.deepcopy(teacher)
    for p in student.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(teacher.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), weight_decay=0.0)
    return TeacherStudentState(teacher, student, opt)


@torch.no_grad()
def ema_update(state: TeacherStudentState, base_decay: float = 0.999, decay: float | None = None) -> float:
    """W_stu <- d * W_stu + (1 - d) * W_tea for every parameter and float buffer."""
    d = ema_decay(state.iteration, base_decay) if decay is None else decay
    tea = state.teacher.state_dict()
    stu = state.student.state_dict()
    if set(tea) != set(stu):
        raise ValueError("teacher and student parameter names differ")
    for name, ws in stu.items():
        wt = tea[name]
        if ws.shape != wt.shape:
            raise ValueError(f"shape mismatch for {name}")
        if ws.is_floating_point():
            ws.copy_(d * ws + (1 - d) * wt)
        else:
            ws.copy_(wt)
    return d


# ---------------------------------------------------------------------------
# augmentation

ROT_PLANES = ((0, 1), (0, 2), (1, 2))


def transform_array(arr: np.ndarray, flips, rotations) -> np.ndarray:
    out = arr
    for axis, flip in enumerate(flips):
        if flip:
            out = np.flip(out, axis)
    for plane, k in zip(ROT_PLANES, rotations):
        if k % 4:
            out = np.rot90(out, k, axes=plane)
    return np.ascontiguousarray(out)


def apply_transform(patch: Patch, flips=(False, False, False), rotations=(0, 0, 0)) -> Patch:
    return dataclasses.replace(
        patch,
        image=transform_array(patch.image, flips, rotations),
        vessel_like=transform_array(patch.vessel_like, flips, rotations),
        mask=None if patch.mask is None else transform_array(patch.mask, flips, rotations),
    )


def augment(patch: Patch, rng: np.random.Generator) -> Patch:
    """Random axis flips and 90-degree rotations in the three axis planes (no interpolation)."""
    flips = tuple(bool(b) for b in rng.integers(0, 2, size=3))
    rotations = tuple(int(k) for k in rng.integers(0, 4, size=3))
    return apply_transform(patch, flips, rotations)


# ---------------------------------------------------------------------------
# training step


def _stack(arrays) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(a, dtype=np.float32) for a in arrays]))[:, None]


def _teacher_view(p: Patch, cfg: TrainerConfig) -> np.ndarray:
    return p.image if cfg.teacher_input == "raw" else p.vessel_like


@dataclass
class StepReport:
    total: float
    sup: float
    ce: float
    dice: float
    boundary: float
    semi: float
    mse: float
    sim: float
    decay: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_mask_cache: dict = {}


def spectral_mask_for(cfg: TrainerConfig) -> torch.Tensor:
    key = (cfg.patch_size, cfg.loss.boundary_mask_fraction, cfg.loss.mask_convention)
    if key not in _mask_cache:
        m = make_spectral_mask((cfg.patch_size,) * 3, cfg.loss.boundary_mask_fraction, cfg.loss.mask_convention)
        _mask_cache[key] = torch.from_numpy(m.astype(np.float32))
    return _mask_cache[key]


def train_step(state: TeacherStudentState, labeled: list[Patch], unlabeled: list[Patch],
               cfg: TrainerConfig) -> StepReport:
    if not labeled:
        raise ValueError("train_step needs at least one labeled patch")
    teacher, student = state.teacher, state.student
    teacher.train()
    n_l = len(labeled)
    use_semi = cfg.semi_enabled and len(unlabeled) > 0

    views = [_teacher_view(p, cfg) for p in labeled]
    if use_semi:
        views += [_teacher_view(p, cfg) for p in unlabeled]
    probs = probabilities(teacher, _stack(views))
    p_l = probs[:n_l]
    y_l = torch.from_numpy(np.stack([p.mask for p in labeled]).astype(np.float32))
    sup = total_supervised_loss(p_l, y_l, spectral_mask_for(cfg), cfg.loss)

    if use_semi:
        student.eval()
        with torch.no_grad():
            q = probabilities(student, _stack([p.vessel_like for p in labeled + unlabeled]))
        semi = semi_supervised_loss(p_l, q[:n_l], probs[n_l:], q[n_l:], cfg.loss.cosine_form)
        semi_total = semi.total
        loss = total_loss(sup.total, semi_total, cfg.loss)
        semi_vals = semi.as_floats()
    else:
        semi_total = torch.zeros(())
        loss = total_loss(sup.total, semi_total, cfg.loss)
        semi_vals = {"mse": 0.0, "sim": 0.0}

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    # decay uses the iteration count of this step, so the very first step copies the teacher
    d = ema_update(state, cfg.ema_base_decay)
    state.iteration += 1
    return StepReport(total=loss.item(), sup=sup.total.item(), semi=semi_total.item(), decay=d,
                      **sup.as_floats(), **semi_vals)


# ---------------------------------------------------------------------------
# inference


def inference_choice(state: TeacherStudentState, cfg: TrainerConfig) -> tuple[nn.Module, bool]:
    """(network, feeds_vessel_like) used for validation and prediction."""
    which = cfg.inference_network
    if which == "auto":
        which = "student" if cfg.semi_enabled else "teacher"
    if which == "student":
        return state.student, True
    return state.teacher, cfg.teacher_input == "vessel_like"


def sliding_window_probabilities(net: nn.Module, data: np.ndarray, patch_size: int, stride: int,
                                 batch: int = 4) -> np.ndarray:
    """Vessel probability map from uniformly averaged overlapping windows."""
    if stride > patch_size or stride < 1:
        raise ValueError("stride must lie in [1, patch_size]")
    if any(n < patch_size for n in data.shape):
        raise ValueError(f"volume {data.shape} smaller than patch {patch_size}")
    positions = grid_positions(data.shape, patch_size, stride, cover_edges=True)
    acc = np.zeros(data.shape, dtype=np.float64)
    hits = np.zeros(data.shape, dtype=np.float64)
    p = patch_size
    was_training = net.training
    net.eval()
    with torch.no_grad():
        for i in range(0, len(positions), batch):
            chunk = positions[i:i + batch]
            x = _stack([data[o[0]:o[0] + p, o[1]:o[1] + p, o[2]:o[2] + p] for o in chunk])
            probs = probabilities(net, x)[:, 1].numpy()
            for o, pr in zip(chunk, probs):
                sl = (slice(o[0], o[0] + p), slice(o[1], o[1] + p), slice(o[2], o[2] + p))
                acc[sl] += pr
                hits[sl] += 1
    net.train(was_training)
    return (acc / hits).astype(np.float32)


def predict_volume(net: nn.Module, vol: Volume, patch_size: int, stride: int, use_vessel_like: bool,
                   aha: AhaParams = AhaParams()) -> tuple[LabelMask, np.ndarray]:
    """Full-volume segmentation. Returns (mask, vessel probability volume).

    With two classes the argmax is ``p_vessel > 0.5``.
    """
    if use_vessel_like:
        data = adaptive_histogram_attention(vol, aha).data
    else:
        data = standardize(vol.data)
    prob = sliding_window_probabilities(net, data, patch_size, stride)
    return LabelMask(prob > 0.5, vol.spacing, vol.origin), prob


def patch_dice(net: nn.Module, patches: list[Patch], use_vessel_like: bool, batch: int = 4) -> float:
    """Micro-averaged DSC of argmax predictions over labeled patches."""
    if not patches:
        return float("nan")
    tp = fp = fn = 0
    was_training = net.training
    net.eval()
    with torch.no_grad():
        for i in range(0, len(patches), batch):
            chunk = patches[i:i + batch]
            x = _stack([p.vessel_like if use_vessel_like else p.image for p in chunk])
            pred = probabilities(net, x)[:, 1].numpy() > 0.5
            gt = np.stack([p.mask for p in chunk]).astype(bool)
            tp += int((pred & gt).sum())
            fp += int((pred & ~gt).sum())
            fn += int((~pred & gt).sum())
    net.train(was_training)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


# ---------------------------------------------------------------------------
# epoch loop


def lr_at_epoch(epoch: int, cfg: TrainerConfig) -> float:
    return cfg.learning_rate * cfg.lr_factor ** (epoch // cfg.lr_step_epochs)


def save_state(state: TeacherStudentState, path, cfg: TrainerConfig, extra: dict | None = None) -> None:
    tensors = {f"teacher/{k}": v for k, v in snapshot_parameters(state.teacher).items()}
    tensors.update({f"student/{k}": v for k, v in snapshot_parameters(state.student).items()})
    opt_meta = []
    for i, p in enumerate(state.teacher.parameters()):
        st = state.optimizer.state.get(p)
        if not st:
            continue
        opt_meta.append({"index": i, "step": float(st["step"])})
        tensors[f"optim/{i}/exp_avg"] = st["exp_avg"]
        tensors[f"optim/{i}/exp_avg_sq"] = st["exp_avg_sq"]
    meta = {"network": cfg.network.to_json(), "trainer": cfg.to_json(), "iteration": state.iteration,
            "epoch": state.epoch, "best_val": state.best_val, "optim": opt_meta, **(extra or {})}
    save_tensors(path, tensors, meta)


def load_state(path, cfg: TrainerConfig) -> TeacherStudentState:
    tensors, meta = load_tensors(path)
    state = make_state(cfg)
    load_parameters(state.teacher, {k[8:]: v for k, v in tensors.items() if k.startswith("teacher/")})
    load_parameters(state.student, {k[8:]: v for k, v in tensors.items() if k.startswith("student/")})
    params = list(state.teacher.parameters())
    for entry in meta["optim"]:
        i = entry["index"]
        state.optimizer.state[params[i]] = {
            "step": torch.tensor(entry["step"]),
            "exp_avg": tensors[f"optim/{i}/exp_avg"].clone(),
            "exp_avg_sq": tensors[f"optim/{i}/exp_avg_sq"].clone(),
        }
    state.iteration = int(meta["iteration"])
    state.epoch = int(meta["epoch"])
    state.best_val = float(meta["best_val"])
    return state


def load_inference_network(path) -> tuple[nn.Module, bool, TrainerConfig]:
    """Network selected for inference from a training checkpoint, plus its input kind and config."""
    _, meta = load_tensors(path)
    cfg = TrainerConfig.from_json(meta["trainer"])
    state = load_state(path, cfg)
    net, vessel_like = inference_choice(state, cfg)
    return net, vessel_like, cfg


@dataclass
class PatchSets:
    labeled: list[Patch]
    unlabeled: list[Patch]
    val_labeled: list[Patch] = field(default_factory=list)


def fit_patches(state: TeacherStudentState, data: PatchSets, cfg: TrainerConfig, out_dir=None,
                resume: bool = True) -> list[dict]:
    """Run the epoch loop from ``state.epoch`` to ``cfg.epochs``.

    With ``out_dir`` set, writes ``train_log.jsonl``, ``last.ckpt`` every epoch
    and ``best.ckpt`` whenever validation DSC improves; an existing
    ``last.ckpt`` there is resumed from.
    """
    if not data.labeled:
        raise ValueError("no labeled training patches")
    out = Path(out_dir) if out_dir is not None else None
    records: list[dict] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.jsonl"
        if resume and (out / "last.ckpt").exists():
            loaded = load_state(out / "last.ckpt", cfg)
            state.teacher, state.student, state.optimizer = loaded.teacher, loaded.student, loaded.optimizer
            state.iteration, state.epoch, state.best_val = loaded.iteration, loaded.epoch, loaded.best_val
            if log_path.exists():
                records = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
                records = records[:state.epoch]
            log.info("resuming at epoch %d", state.epoch)
        log_path.write_text("".join(json.dumps(r) + "\n" for r in records))

    n_l, n_u = len(data.labeled), len(data.unlabeled)
    bs = cfg.batch_size
    steps = cfg.steps_per_epoch or math.ceil(n_l / bs)
    if cfg.loss.cosine_form == CosineForm.PAPER_EXACT_EXP_COS and cfg.semi_enabled:
        log.warning("literal exp(+cos) consistency form: minimizing it pushes predictions apart")

    while state.epoch < cfg.epochs:
        epoch = state.epoch
        t0 = time.perf_counter()
        lr = lr_at_epoch(epoch, cfg)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        rng = fork_rng(cfg.seed, f"epoch{epoch}")
        order_l = rng.permutation(n_l)
        order_u = rng.permutation(n_u) if n_u else np.zeros(0, dtype=int)
        sums: dict[str, float] = {}
        for step in range(steps):
            lab = [data.labeled[order_l[(step * bs + j) % n_l]] for j in range(bs)]
            unl = [data.unlabeled[order_u[(step * bs + j) % n_u]] for j in range(bs)] if n_u else []
            if cfg.augment:
                lab = [augment(p, rng) for p in lab]
                unl = [augment(p, rng) for p in unl]
            rep = train_step(state, lab, unl, cfg)
            for k, v in rep.as_dict().items():
                sums[k] = sums.get(k, 0.0) + v
        net, vessel_like = inference_choice(state, cfg)
        val_dsc = patch_dice(net, data.val_labeled, vessel_like) if data.val_labeled else float("nan")
        state.epoch = epoch + 1
        record = {"epoch": epoch, "lr": lr, "iteration": state.iteration,
                  "val_dsc": None if math.isnan(val_dsc) else val_dsc,
                  **{k: v / steps for k, v in sums.items()}, "wall_time": time.perf_counter() - t0}
        records.append(record)
        improved = not math.isnan(val_dsc) and val_dsc > state.best_val
        if improved:
            state.best_val = val_dsc
        if out is not None:
            with open(out / "train_log.jsonl", "a") as f:
                f.write(json.dumps(record) + "\n")
            save_state(state, out / "last.ckpt", cfg)
            if improved:
                save_state(state, out / "best.ckpt", cfg)
        log.info("epoch %d lr %.2e loss %.4f val_dsc %.4f", epoch, lr, record["total"], val_dsc)
    return records


def patch_sets(manifest: DatasetManifest, cfg: TrainerConfig) -> PatchSets:
    """Training and validation patches from the ``train`` and ``val`` splits (all cases if unsplit)."""
    def gather(split):
        labeled, unlabeled = [], []
        for rec in manifest.split(split):
            case = case_from_manifest(manifest, rec, cfg.spacing, cfg.aha)
            lab, unl = case.patches(cfg.patch_size, cfg.patch_stride)
            labeled += lab
            unlabeled += unl
        return labeled, unlabeled

    if not manifest.splits:
        log.warning("manifest has no splits; training on all %d cases without validation", len(manifest.cases))
        manifest = dataclasses.replace(manifest, splits={"train": [c.id for c in manifest.cases]})
    labeled, unlabeled = gather("train")
    val_labeled = gather("val")[0] if "val" in manifest.splits else []
    return PatchSets(labeled, unlabeled, val_labeled)


def fit(state: TeacherStudentState, manifest: DatasetManifest, cfg: TrainerConfig, out_dir=None,
        resume: bool = True) -> list[dict]:
    data = patch_sets(manifest, cfg)
    log.info("%d labeled, %d unlabeled, %d validation patches",
             len(data.labeled), len(data.unlabeled), len(data.val_labeled))
    return fit_patches(state, data, cfg, out_dir, resume)
