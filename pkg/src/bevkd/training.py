"""Teacher pre-training, frozen-teacher distillation, and the optimization loop.

The teacher is the LiDAR branch (pillar stats -> sparse encoder -> dense
encoder -> class head), trained on the detection loss alone and then frozen
bit-for-bit. The student is the radar branch with the densifier inserted
between its sparse encoder and dense encoder. One distillation step forwards
both branches, combines the detection loss with the two feature-distillation
losses, and applies a single Adam update to student parameters only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .afd import AfdTotal, active_mask, afd_total, partition_low
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .heatmap import Heatmap, render_gt_heatmap
from .networks import (
    ClassHead,
    Densifier,
    DenseEncoder,
    ParamStore,
    SparseEncoder,
)
from .pfd import partition_high, pfd_total, proposal_weights
from .pillars import GridGeometry, encode_pillars, pillarize
from .scene import Scene
from .tensor import Array, FeatureMap, GradPair

BEV_STRIDE = 8


@dataclass
class ModelConfig:
    f2d_channels: int = 6
    base_channels: int = 16
    cma_widths: tuple[int, int] | None = None
    n_classes: int = 3
    head_channels: int | None = None


@dataclass
class TrainConfig:
    alpha: float = 3e-4
    beta: float = 5e-5
    lambda1: float = 5.0
    lambda2: float = 1.0
    gamma: float = 5.0
    delta: float = 25.0
    sigma: float = 0.1
    learning_rate: float = 1e-3
    steps: int = 300
    pretrain_steps: int = 500
    seed: int = 0
    inherit_teacher_weights: bool = True
    det_loss_enabled: bool = True

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "lambda1", "lambda2", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not (0.0 < self.sigma < 1.0):
            raise ConfigError(f"sigma must lie in (0, 1), got {self.sigma}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.steps < 0 or self.pretrain_steps < 0:
            raise ConfigError("step counts must be >= 0")


def det_loss(pred: Heatmap, gt: Heatmap) -> GradPair:
    """Penalty-reduced pixelwise focal loss with exponents (2, 4).

    Center cells are those where the target is exactly 1; the loss is
    normalized by their count (floored at 1). The returned gradient is with
    respect to the predicted heatmap values; composing it with the class
    head's backward yields the gradient at the logits.
    """
    p, t = pred.values, gt.values
    if p.shape != t.shape:
        raise ShapeError(f"heatmap shapes differ: {p.shape} vs {t.shape}")
    if p.min() <= 0.0 or p.max() >= 1.0:
        raise DomainError("predicted heatmap values must lie strictly in (0, 1)")
    centers = t == 1.0
    n = max(1, int(centers.sum()))
    log_p = np.log(p)
    log_1mp = np.log1p(-p)
    neg_w = (1.0 - t) ** 4
    pos_term = -((1.0 - p) ** 2) * log_p
    neg_term = -neg_w * (p * p) * log_1mp
    value = (float(pos_term[centers].sum()) + float(neg_term[~centers].sum())) / n
    grad = np.where(
        centers,
        2.0 * (1.0 - p) * log_p - ((1.0 - p) ** 2) / p,
        neg_w * (-2.0 * p * log_1mp + (p * p) / (1.0 - p)),
    ) / n
    return GradPair(value=value, grad=grad)


def total_loss(l_det: float, l_afd: float, l_pfd: float, gamma: float, delta: float) -> float:
    for name, v in (("l_det", l_det), ("l_afd", l_afd), ("l_pfd", l_pfd)):
        if not math.isfinite(v):
            raise NumericError(f"{name} is not finite: {v}")
    return l_det + gamma * l_afd + delta * l_pfd


class Adam:
    """Per-parameter Adam with a shared step counter; updates only the
    parameters that received a gradient, in sorted name order."""

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}
        self.t = 0

    def step(self, params: ParamStore, grads: ParamStore) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name], self.v[name] = m, v
            params[name] = params[name] - self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class SceneTensors:
    """A scene pushed through pillarization: the trainer's per-step input."""

    lidar_f2d: FeatureMap
    radar_f2d: FeatureMap
    gt_heat: Heatmap


def prepare_scene(scene: Scene, geom: GridGeometry, model: ModelConfig) -> SceneTensors:
    lidar_f2d = encode_pillars(pillarize(scene.lidar, geom), model.f2d_channels)
    radar_f2d = encode_pillars(pillarize(scene.radar, geom), model.f2d_channels)
    gt_heat, _ = render_gt_heatmap(scene.boxes, geom, BEV_STRIDE, model.n_classes)
    return SceneTensors(lidar_f2d, radar_f2d, gt_heat)


@dataclass
class TeacherForward:
    f_low: FeatureMap
    h_first: FeatureMap
    h_second: FeatureMap
    heat: Heatmap
    caches: dict | None = None


@dataclass
class StudentForward:
    f_low: FeatureMap
    dense_first: FeatureMap
    dense_second: FeatureMap
    h_first: FeatureMap
    h_second: FeatureMap
    heat: Heatmap
    caches: dict | None = None


def _acc(base: Array | None, extra: Array | None) -> Array | None:
    if base is None:
        return extra
    if extra is None:
        return base
    return base + extra


class TeacherNets:
    def __init__(self, model: ModelConfig):
        c = model.base_channels
        self.sparse = SparseEncoder(model.f2d_channels, c)
        self.dense = DenseEncoder(c)
        self.head = ClassHead(c, model.n_classes, model.head_channels)

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        params: ParamStore = {}
        for part in (self.sparse, self.dense, self.head):
            params.update(part.init_params(rng))
        return params

    def forward(self, params: ParamStore, f2d: FeatureMap, with_cache: bool = False) -> TeacherForward:
        f_low, c_sparse = self.sparse.apply_with_cache(params, f2d)
        (h1, h2), c_dense = self.dense.apply_with_cache(params, f_low)
        heat, c_head = self.head.apply_with_cache(params, h2)
        caches = {"sparse": c_sparse, "dense": c_dense, "head": c_head} if with_cache else None
        return TeacherForward(f_low, h1, h2, heat, caches)

    def backward(self, params: ParamStore, caches: dict, g_heat: Array) -> ParamStore:
        grads, g_h2 = self.head.grads(params, caches["head"], g_heat)
        # h_first and h_second share a shape; h_first has no direct upstream
        # in detection-only training.
        dense_grads, g_low = self.dense.grads(params, caches["dense"], (np.zeros_like(g_h2), g_h2))
        grads.update(dense_grads)
        sparse_grads, _ = self.sparse.grads(params, caches["sparse"], g_low)
        grads.update(sparse_grads)
        return grads


class StudentNets:
    def __init__(self, model: ModelConfig):
        c = model.base_channels
        self.sparse = SparseEncoder(model.f2d_channels, c)
        self.cma = Densifier(c, model.cma_widths)
        self.dense = DenseEncoder(c)
        self.head = ClassHead(c, model.n_classes, model.head_channels)

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        params: ParamStore = {}
        for part in (self.sparse, self.cma, self.dense, self.head):
            params.update(part.init_params(rng))
        return params

    def forward(self, params: ParamStore, f2d: FeatureMap, with_cache: bool = False) -> StudentForward:
        f_low, c_sparse = self.sparse.apply_with_cache(params, f2d)
        (l1, l2), c_cma = self.cma.apply_with_cache(params, f_low)
        (h1, h2), c_dense = self.dense.apply_with_cache(params, l2)
        heat, c_head = self.head.apply_with_cache(params, h2)
        caches = (
            {"sparse": c_sparse, "cma": c_cma, "dense": c_dense, "head": c_head}
            if with_cache
            else None
        )
        return StudentForward(f_low, l1, l2, h1, h2, heat, caches)

    def backward(
        self,
        params: ParamStore,
        caches: dict,
        shapes: StudentForward,
        g_heat: Array | None = None,
        g_h1: Array | None = None,
        g_h2: Array | None = None,
        g_l1: Array | None = None,
        g_l2: Array | None = None,
    ) -> ParamStore:
        """Accumulate student-parameter gradients from any subset of upstream
        gradients. Absent contributions are skipped entirely (not added as
        zeros), so a run with distillation weights at zero is arithmetically
        identical to detection-only training."""
        grads: ParamStore = {}
        g_h2_acc = g_h2
        if g_heat is not None:
            head_grads, g_from_head = self.head.grads(params, caches["head"], g_heat)
            grads.update(head_grads)
            g_h2_acc = _acc(g_h2_acc, g_from_head)
        g_l2_acc = g_l2
        if g_h1 is not None or g_h2_acc is not None:
            up_h1 = g_h1 if g_h1 is not None else np.zeros(shapes.h_first.shape)
            up_h2 = g_h2_acc if g_h2_acc is not None else np.zeros(shapes.h_second.shape)
            dense_grads, g_from_dense = self.dense.grads(params, caches["dense"], (up_h1, up_h2))
            grads.update(dense_grads)
            g_l2_acc = _acc(g_l2_acc, g_from_dense)
        if g_l1 is not None or g_l2_acc is not None:
            up_l1 = g_l1 if g_l1 is not None else np.zeros(shapes.dense_first.shape)
            up_l2 = g_l2_acc if g_l2_acc is not None else np.zeros(shapes.dense_second.shape)
            cma_grads, g_low = self.cma.grads(params, caches["cma"], (up_l1, up_l2))
            grads.update(cma_grads)
            sparse_grads, _ = self.sparse.grads(params, caches["sparse"], g_low)
            grads.update(sparse_grads)
        return grads


def inherit_matching_params(student: ParamStore, teacher: ParamStore) -> int:
    """Copy every teacher parameter whose name and shape the student shares."""
    copied = 0
    for name, value in teacher.items():
        if name in student and student[name].shape == value.shape:
            student[name] = value.copy()
            copied += 1
    return copied


@dataclass
class TrainState:
    student_params: ParamStore
    teacher_params: ParamStore  # frozen: must stay bitwise constant
    optimizer: Adam
    step: int
    loss_history: list[float]
    teacher_nets: TeacherNets
    student_nets: StudentNets
    model: ModelConfig
    cfg: TrainConfig


@dataclass
class LossReport:
    """Per-step losses, region diagnostics, and the raw feature gradients."""

    l_det: float
    l_afd: float
    l_pfd: float
    l_total: float
    ar_cosine: float
    active_ratio_l: float
    active_ratio_l1: float
    n_ar: int
    n_ir: int
    n_tp: int
    n_fp: int
    n_fn: int
    feature_grads: dict[str, Array] | None = None

    def to_record(self, step: int) -> dict:
        return {
            "step": step,
            "L_det": self.l_det,
            "L_AFD": self.l_afd,
            "L_PFD": self.l_pfd,
            "L_total": self.l_total,
            "ar_cosine": self.ar_cosine,
            "active_ratio_l": self.active_ratio_l,
            "active_ratio_l1": self.active_ratio_l1,
            "n_ar": self.n_ar,
            "n_ir": self.n_ir,
            "n_tp": self.n_tp,
            "n_fp": self.n_fp,
            "n_fn": self.n_fn,
        }


def ar_cell_cosine(student_low: FeatureMap, teacher_low: FeatureMap) -> float:
    """Mean-centered cosine between the two feature maps restricted to AR cells.

    Centering removes the positivity bias of rectified features, so unrelated
    maps score near zero instead of near their shared mean direction.
    """
    p = partition_low(active_mask(student_low), active_mask(teacher_low))
    if p.n_ar == 0:
        return 0.0
    a = student_low.values[:, p.ar].ravel()
    b = teacher_low.values[:, p.ar].ravel()
    a = a - a.mean()
    b = b - b.mean()
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def _mean_det_loss(nets: TeacherNets, params: ParamStore, scenes: list[SceneTensors]) -> float:
    values = []
    for st in scenes:
        fwd = nets.forward(params, st.lidar_f2d)
        values.append(det_loss(fwd.heat, st.gt_heat).value)
    return float(np.mean(values))


def pretrain_teacher(
    scenes: list[SceneTensors], model: ModelConfig, cfg: TrainConfig
) -> tuple[ParamStore, list[float]]:
    """Train the LiDAR branch on the detection loss until the mean loss over
    the scene set halves (checked once per epoch) or steps run out."""
    if not scenes:
        raise ConfigError("pretraining needs at least one scene")
    nets = TeacherNets(model)
    params = nets.init_params(np.random.default_rng(cfg.seed))
    optimizer = Adam(cfg.learning_rate)
    initial = _mean_det_loss(nets, params, scenes)
    history = [initial]
    for step in range(cfg.pretrain_steps):
        if step > 0 and step % len(scenes) == 0:
            current = _mean_det_loss(nets, params, scenes)
            history.append(current)
            if current <= 0.5 * initial:
                break
        st = scenes[step % len(scenes)]
        fwd = nets.forward(params, st.lidar_f2d, with_cache=True)
        pair = det_loss(fwd.heat, st.gt_heat)
        if not math.isfinite(pair.value):
            raise NumericError(f"teacher pretraining diverged at step {step}: loss={pair.value}")
        grads = nets.backward(params, fwd.caches, pair.grad)
        optimizer.step(params, grads)
    history.append(_mean_det_loss(nets, params, scenes))
    return params, history


def new_train_state(
    teacher_params: ParamStore, model: ModelConfig, cfg: TrainConfig
) -> TrainState:
    teacher_nets = TeacherNets(model)
    student_nets = StudentNets(model)
    student_params = student_nets.init_params(np.random.default_rng(cfg.seed + 1))
    if cfg.inherit_teacher_weights:
        inherit_matching_params(student_params, teacher_params)
    return TrainState(
        student_params=student_params,
        teacher_params=teacher_params,
        optimizer=Adam(cfg.learning_rate),
        step=0,
        loss_history=[],
        teacher_nets=teacher_nets,
        student_nets=student_nets,
        model=model,
        cfg=cfg,
    )


def det_only_step(state: TrainState, scene: SceneTensors) -> float:
    """One detection-only student update; the reference path that
    ``distill_step`` must match bit-for-bit when gamma = delta = 0."""
    nets = state.student_nets
    fwd = nets.forward(state.student_params, scene.radar_f2d, with_cache=True)
    pair = det_loss(fwd.heat, scene.gt_heat)
    grads = nets.backward(state.student_params, fwd.caches, fwd, g_heat=pair.grad)
    state.optimizer.step(state.student_params, grads)
    state.step += 1
    state.loss_history.append(pair.value)
    return pair.value


def distill_step(state: TrainState, scene: SceneTensors) -> tuple[TrainState, LossReport]:
    """Forward both branches, combine detection and distillation losses, and
    apply one Adam update to the student. Teacher parameters are never
    touched; region masks and weights are constants under differentiation."""
    cfg = state.cfg
    teacher = state.teacher_nets.forward(state.teacher_params, scene.lidar_f2d)
    student = state.student_nets.forward(state.student_params, scene.radar_f2d, with_cache=True)

    afd = afd_total(teacher.f_low, student.dense_first, student.dense_second, cfg.alpha, cfg.beta)
    region = partition_high(scene.gt_heat, student.heat, cfg.sigma)
    weights = proposal_weights(region, cfg.lambda1, cfg.lambda2)
    pfd = pfd_total(
        (teacher.h_first, teacher.h_second), (student.h_first, student.h_second), weights
    )
    det = det_loss(student.heat, scene.gt_heat) if cfg.det_loss_enabled else None
    l_det = det.value if det is not None else 0.0
    l_total = total_loss(l_det, afd.value, pfd.value, cfg.gamma, cfg.delta)
    if not math.isfinite(l_total):
        raise NumericError(
            f"distillation diverged at step {state.step}: "
            f"det={l_det} afd={afd.value} pfd={pfd.value}"
        )

    # Zero-coefficient branches are skipped, not zero-added: with gamma =
    # delta = 0 this path performs exactly the det_only_step arithmetic.
    grads = state.student_nets.backward(
        state.student_params,
        student.caches,
        student,
        g_heat=det.grad if det is not None else None,
        g_h1=cfg.delta * pfd.grad_first if cfg.delta != 0.0 else None,
        g_h2=cfg.delta * pfd.grad_second if cfg.delta != 0.0 else None,
        g_l1=cfg.gamma * afd.grad_first if cfg.gamma != 0.0 else None,
        g_l2=cfg.gamma * afd.grad_second if cfg.gamma != 0.0 else None,
    )
    state.optimizer.step(state.student_params, grads)
    state.step += 1
    state.loss_history.append(l_total)

    report = LossReport(
        l_det=l_det,
        l_afd=afd.value,
        l_pfd=pfd.value,
        l_total=l_total,
        ar_cosine=ar_cell_cosine(student.dense_second, teacher.f_low),
        active_ratio_l=active_mask(student.f_low).active_ratio,
        active_ratio_l1=active_mask(student.dense_first).active_ratio,
        n_ar=afd.partitions[1].n_ar,
        n_ir=afd.partitions[1].n_ir,
        n_tp=region.n_tp,
        n_fp=region.n_fp,
        n_fn=region.n_fn,
        feature_grads={
            "dense_first": afd.grad_first,
            "dense_second": afd.grad_second,
            "h_first": pfd.grad_first,
            "h_second": pfd.grad_second,
        },
    )
    return state, report


@dataclass
class EvalMetrics:
    l_det: float
    l_afd: float
    l_pfd: float
    l_total: float
    ar_cosine: float
    active_ratio_teacher_l: float
    active_ratio_l: float
    active_ratio_l1: float
    active_ratio_l2: float
    n_ar: float
    n_ir: float
    n_tp: float
    n_fp: float
    n_fn: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalMetrics":
        return cls(**json.loads(text))


def evaluate(state: TrainState, scenes: list[SceneTensors]) -> EvalMetrics:
    """Read-only metrics pass over a scene set; deterministic."""
    cfg = state.cfg
    rows = []
    for scene in scenes:
        teacher = state.teacher_nets.forward(state.teacher_params, scene.lidar_f2d)
        student = state.student_nets.forward(state.student_params, scene.radar_f2d)
        afd = afd_total(
            teacher.f_low, student.dense_first, student.dense_second, cfg.alpha, cfg.beta
        )
        region = partition_high(scene.gt_heat, student.heat, cfg.sigma)
        weights = proposal_weights(region, cfg.lambda1, cfg.lambda2)
        pfd = pfd_total(
            (teacher.h_first, teacher.h_second), (student.h_first, student.h_second), weights
        )
        l_det = det_loss(student.heat, scene.gt_heat).value if cfg.det_loss_enabled else 0.0
        rows.append(
            (
                l_det,
                afd.value,
                pfd.value,
                total_loss(l_det, afd.value, pfd.value, cfg.gamma, cfg.delta),
                ar_cell_cosine(student.dense_second, teacher.f_low),
                active_mask(teacher.f_low).active_ratio,
                active_mask(student.f_low).active_ratio,
                active_mask(student.dense_first).active_ratio,
                active_mask(student.dense_second).active_ratio,
                afd.partitions[1].n_ar,
                afd.partitions[1].n_ir,
                region.n_tp,
                region.n_fp,
                region.n_fn,
            )
        )
    means = [float(np.mean(col)) for col in zip(*rows)]
    return EvalMetrics(*means)


def run_training(
    scenes: list[SceneTensors],
    model: ModelConfig,
    cfg: TrainConfig,
    teacher_params: ParamStore | None = None,
    on_step=None,
) -> tuple[TrainState, list[LossReport]]:
    """Pretrain the teacher (unless given), then run the distillation loop."""
    if teacher_params is None:
        teacher_params, _ = pretrain_teacher(scenes, model, cfg)
    state = new_train_state(teacher_params, model, cfg)
    reports: list[LossReport] = []
    for step in range(cfg.steps):
        _, report = distill_step(state, scenes[step % len(scenes)])
        reports.append(report)
        if on_step is not None:
            on_step(step, report)
    return state, reports
