"""Scaffolded student training with a learnable teacher-side explainer.

A frozen teacher provides two signals for each training sequence: its
own prediction, and a saliency map over tokens. The student minimizes

    L_student = L_sim(student, teacher) + beta * L_expl(E_S, E_T)

where L_sim is cross-entropy against the teacher's predicted label (or
squared error against its score) and L_expl is a KL divergence between
the student's and teacher's saliency maps.

Three modes share this loop:

* ``none``: beta is forced to zero, plain hard-label distillation;
* ``static:<name>``: E_T comes from a fixed saliency method;
* ``smat``: E_T is a learned combination of the teacher's attention
  heads. Its coefficients phi_T are updated by an outer step: take an
  uncommitted lookahead SGD step on the student, measure the simulation
  loss gradient v at the lookahead weights on a held-out batch, and push
  phi_T along the mixed second derivative of the student loss against v
  (a Hessian-vector product, by central differences or exactly through
  the graph). The inner step never touches phi_T; the outer step never
  commits the lookahead weights.

The student-side explainer is always the learned head-combination
explainer over the student's own heads, restricted to the last layer
when the teacher-side explainer is the last-layer attention mean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from collections.abc import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Example, Splits
from .explainers import (
    STATIC_EXPLAINERS,
    ExplainerParams,
    combine_head_logits,
    compute_static_saliency,
    default_beta,
    head_logit_matrix,
    normalize_coefficients,
    saliency_from_internals,
    scope_head_indices,
)
from .metrics import simulability_accuracy, simulability_pearson
from .model import MiniTransformer, ModelConfig

logger = logging.getLogger(__name__)

MODES = ("none", "static", "smat")

HYPERGRAD_MODES = ("central", "exact")

KL_DIRECTIONS = ("teacher_to_student", "student_to_teacher")

SIM_LOSSES = ("cross_entropy", "mse")


@dataclass
class TrainConfig:
    """Student training hyperparameters.

    ``mode`` is ``none``, ``smat``, or ``static:<explainer>`` where the
    explainer is one of the five static saliency methods. ``beta``
    defaults by explainer family (attention 5.0, gradient 0.2) and is
    forced to zero in mode ``none``.
    """

    mode: str = "none"
    beta: float | None = None
    eta_inner: float = 0.1
    eta_outer: float = 0.05
    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    normalize: str = "sparsemax"
    sim_loss: str = "cross_entropy"
    kl_direction: str = "teacher_to_student"
    hypergrad: str = "central"
    ig_steps: int = 10
    soft_targets: bool = False
    eval_every: int = 100

    def __post_init__(self) -> None:
        kind = self.mode_kind()
        if kind not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if kind == "static" and self.static_name() not in STATIC_EXPLAINERS:
            raise ValueError(f"unknown static explainer in mode {self.mode!r}")
        if self.normalize not in ("sparsemax", "softmax", "none"):
            raise ValueError(f"unknown normalization {self.normalize!r}")
        if self.sim_loss not in SIM_LOSSES:
            raise ValueError(f"unknown sim_loss {self.sim_loss!r}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")
        if self.hypergrad not in HYPERGRAD_MODES:
            raise ValueError(f"unknown hypergrad mode {self.hypergrad!r}")
        if self.eta_inner <= 0 or self.eta_outer < 0:
            raise ValueError("eta_inner must be positive and eta_outer non-negative")
        if self.beta is not None and self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1 or self.ig_steps < 1:
            raise ValueError("batch_size and ig_steps must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def mode_kind(self) -> str:
        return self.mode.split(":", 1)[0]

    def static_name(self) -> str | None:
        if self.mode_kind() != "static":
            return None
        parts = self.mode.split(":", 1)
        return parts[1] if len(parts) == 2 else None

    def effective_beta(self) -> float:
        if self.mode_kind() == "none":
            if self.beta not in (None, 0, 0.0):
                logger.warning("mode 'none' forces beta to 0 (config had %s)", self.beta)
            return 0.0
        if self.beta is not None:
            return float(self.beta)
        if self.mode_kind() == "smat":
            return default_beta("parameterized")
        return default_beta(self.static_name())

    def explainer_scope(self) -> str:
        """Scope shared by the teacher- and student-side explainers."""
        return "last" if self.static_name() == "attn_last" else "all"

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "beta": self.beta,
            "eta_inner": self.eta_inner,
            "eta_outer": self.eta_outer,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "normalize": self.normalize,
            "sim_loss": self.sim_loss,
            "kl_direction": self.kl_direction,
            "hypergrad": self.hypergrad,
            "ig_steps": self.ig_steps,
            "soft_targets": self.soft_targets,
            "eval_every": self.eval_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class TeacherContext:
    """Frozen teacher plus per-example caches.

    The teacher's predictions, head-logit matrices, and static saliency
    maps are deterministic once the teacher is frozen, so they are
    computed once per distinct token sequence.
    """

    def __init__(self, teacher: MiniTransformer, config: TrainConfig) -> None:
        teacher.freeze()
        self.teacher = teacher
        self.config = config
        self.scope = config.explainer_scope()
        self._targets: dict[tuple[int, ...], int | float] = {}
        self._probs: dict[tuple[int, ...], np.ndarray] = {}
        self._head_logits: dict[tuple[int, ...], np.ndarray] = {}
        self._static: dict[tuple[int, ...], np.ndarray] = {}

    @staticmethod
    def _key(token_ids: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(i) for i in token_ids)

    def target(self, token_ids: Sequence[int]) -> int | float:
        key = self._key(token_ids)
        if key not in self._targets:
            self._targets[key] = self.teacher.predict(token_ids)
        return self._targets[key]

    def probs(self, token_ids: Sequence[int]) -> np.ndarray:
        key = self._key(token_ids)
        if key not in self._probs:
            with ad.no_grad():
                logits = self.teacher.forward(token_ids)
                self._probs[key] = ad.softmax(logits, axis=-1).data
        return self._probs[key]

    def head_logits(self, token_ids: Sequence[int]) -> np.ndarray:
        """(in-scope teacher heads, L) saliency-logit matrix."""
        key = self._key(token_ids)
        if key not in self._head_logits:
            self._head_logits[key] = head_logit_matrix(self.teacher, token_ids, self.scope)
        return self._head_logits[key]

    def static_saliency(self, token_ids: Sequence[int]) -> np.ndarray:
        key = self._key(token_ids)
        if key not in self._static:
            name = self.config.static_name()
            sal = compute_static_saliency(
                self.teacher, token_ids, name, ig_steps=self.config.ig_steps
            )
            self._static[key] = sal.scores
        return self._static[key]

    def teacher_saliency(self, token_ids: Sequence[int], phi_t: Tensor) -> Tensor:
        """E_T for one example: learned combination or static constant."""
        kind = self.config.mode_kind()
        if kind == "smat":
            stack = ad.constant(self.head_logits(token_ids), dtype=phi_t.dtype)
            lam = normalize_coefficients(phi_t, self.config.normalize)
            return combine_head_logits(stack, lam)
        if kind == "static":
            return ad.constant(self.static_saliency(token_ids))
        raise ValueError("mode 'none' has no teacher explainer")


@dataclass
class TrainState:
    """Mutable training state: student weights and both explainer params."""

    student: MiniTransformer
    phi_s: Tensor
    phi_t: Tensor
    step: int = 0
    last_loss: float | None = None


@dataclass
class TrainRecord:
    step: int
    train_loss: float
    dev_simulability: float | None
    active_heads: int

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "train_loss": self.train_loss,
            "dev_simulability": self.dev_simulability,
            "active_heads": self.active_heads,
        }


@dataclass
class TrainResult:
    student: MiniTransformer
    phi_s: Tensor
    phi_t: Tensor
    log: list[TrainRecord] = field(default_factory=list)


def _sim_term(student: MiniTransformer, tctx: TeacherContext, example: Example,
              config: TrainConfig, params: dict[str, Tensor] | None = None,
              output: Tensor | None = None) -> Tensor:
    ids = example.token_ids
    out = output if output is not None else student.forward(ids, params=params)
    if config.sim_loss == "cross_entropy":
        if student.config.task != "classification":
            raise ValueError("cross_entropy sim loss needs a classification student")
        if config.soft_targets:
            target = ad.constant(tctx.probs(ids), dtype=out.dtype)
            return ad.cross_entropy(out, target)
        return ad.cross_entropy(out, int(tctx.target(ids)))
    target = ad.constant(np.asarray(tctx.target(ids), dtype=out.dtype))
    diff = ad.sub(out, target)
    return ad.mul(diff, diff)


def _explanation_term(
    student: MiniTransformer,
    tctx: TeacherContext,
    example: Example,
    phi_s: Tensor,
    phi_t: Tensor,
    config: TrainConfig,
    internals,
) -> Tensor:
    scope = config.explainer_scope()
    idx = scope_head_indices(student, scope)
    e_s = saliency_from_internals(
        internals, ExplainerParams(phi=phi_s, normalize=config.normalize, scope=scope), idx
    )
    e_t = tctx.teacher_saliency(example.token_ids, phi_t)
    if config.kl_direction == "teacher_to_student":
        return ad.kl_divergence(e_t, e_s)
    return ad.kl_divergence(e_s, e_t)


def student_loss(
    student: MiniTransformer,
    tctx: TeacherContext,
    phi_s: Tensor,
    phi_t: Tensor,
    batch: Sequence[Example],
    config: TrainConfig,
) -> Tensor:
    """Mean per-example student loss over one batch (a graph scalar)."""
    if not batch:
        raise ValueError("empty batch")
    beta = config.effective_beta()
    terms: list[Tensor] = []
    for example in batch:
        if beta > 0.0:
            out, internals = student.forward(example.token_ids, record=True)
            term = _sim_term(student, tctx, example, config, output=out)
            expl = _explanation_term(student, tctx, example, phi_s, phi_t, config, internals)
            term = ad.add(term, ad.mul(ad.constant(np.asarray(beta, dtype=term.dtype)), expl))
        else:
            term = _sim_term(student, tctx, example, config)
        terms.append(ad.reshape(term, ()))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.mul(total, ad.constant(np.asarray(1.0 / len(terms), dtype=total.dtype)))


def inner_step(
    state: TrainState,
    batch: Sequence[Example],
    config: TrainConfig,
    tctx: TeacherContext,
) -> TrainState:
    """One SGD step on the student weights and phi_S from a shared loss.

    Both gradients come from the same loss evaluation on the same batch.
    phi_T is never touched here.
    """
    params = list(state.student.param_list())
    if config.effective_beta() != 0.0:
        # without the explanation term phi_S never reaches the loss
        params.append(state.phi_s)
    loss = student_loss(state.student, tctx, state.phi_s, state.phi_t, batch, config)
    grads = ad.backward(loss, params)
    for p, g in zip(params, grads):
        p.data = p.data - config.eta_inner * g.data
    state.step += 1
    state.last_loss = loss.item()
    return state


def _sim_only_loss(
    student: MiniTransformer,
    tctx: TeacherContext,
    batch: Sequence[Example],
    config: TrainConfig,
    params: dict[str, Tensor],
) -> Tensor:
    terms = [
        ad.reshape(_sim_term(student, tctx, ex, config, params=params), ())
        for ex in batch
    ]
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.mul(total, ad.constant(np.asarray(1.0 / len(terms), dtype=total.dtype)))


def _phi_t_gradient(
    state: TrainState,
    batch: Sequence[Example],
    config: TrainConfig,
    tctx: TeacherContext,
    probe_params: dict[str, Tensor],
) -> np.ndarray:
    """Gradient of the student loss with respect to phi_T at probe weights.

    Only the explanation term depends on phi_T, so the simulation term
    is dropped; the student-side saliency is evaluated at the probe
    weights and treated as a constant.
    """
    beta = config.effective_beta()
    scope = config.explainer_scope()
    idx = scope_head_indices(state.student, scope)
    phi_leaf = Tensor(state.phi_t.data.copy(), requires_grad=True, name="phi_t_probe")
    s_params = ExplainerParams(phi=state.phi_s, normalize=config.normalize, scope=scope)
    terms: list[Tensor] = []
    for example in batch:
        with ad.no_grad():
            _, internals = state.student.forward(
                example.token_ids, record=True, params=probe_params
            )
            e_s_const = saliency_from_internals(internals, s_params, idx)
        e_t = tctx.teacher_saliency(example.token_ids, phi_leaf)
        if config.kl_direction == "teacher_to_student":
            terms.append(ad.kl_divergence(e_t, ad.constant(e_s_const.data)))
        else:
            terms.append(ad.kl_divergence(ad.constant(e_s_const.data), e_t))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    scale = beta / len(terms)
    loss = ad.mul(total, ad.constant(np.asarray(scale, dtype=total.dtype)))
    return ad.backward(loss, [phi_leaf])[0].data


def outer_step(
    state: TrainState,
    train_batch: Sequence[Example],
    outer_batch: Sequence[Example],
    config: TrainConfig,
    tctx: TeacherContext,
) -> TrainState:
    """One hypergradient step on phi_T; student weights stay committed.

    The lookahead weights theta - eta_inner * grad(L_student) exist only
    inside this call. The hypergradient is -eta_inner * M v, with v the
    simulation-loss gradient at the lookahead weights on the outer batch
    and M v the mixed second derivative realized by central differences
    around the committed weights (or exactly through the graph).
    """
    if config.mode_kind() != "smat":
        return state
    beta = config.effective_beta()
    if beta == 0.0 or config.eta_outer == 0.0:
        return state

    student = state.student
    names = student.param_names()
    theta = student.param_list()

    if config.hypergrad == "exact":
        loss_train = student_loss(student, tctx, state.phi_s, state.phi_t, train_batch, config)
        g_theta = ad.backward(loss_train, theta, create_graph=True)
        eta = ad.constant(np.asarray(config.eta_inner, dtype=theta[0].dtype))
        pilot = {
            name: ad.sub(t, ad.mul(eta, g))
            for name, t, g in zip(names, theta, g_theta)
        }
        sim = _sim_only_loss(student, tctx, outer_batch, config, pilot)
        hyper = ad.backward(sim, [state.phi_t])[0].data
    else:
        loss_train = student_loss(student, tctx, state.phi_s, state.phi_t, train_batch, config)
        g_theta = [g.data for g in ad.backward(loss_train, theta)]
        pilot = {
            name: Tensor(t.data - config.eta_inner * g, requires_grad=True, name=name)
            for name, t, g in zip(names, theta, g_theta)
        }
        sim = _sim_only_loss(student, tctx, outer_batch, config, pilot)
        v = [g.data.astype(np.float64) for g in ad.backward(sim, list(pilot.values()))]
        v_norm = float(np.sqrt(sum(float((x**2).sum()) for x in v)))
        eps = ad.HVP_EPS0 / max(v_norm, ad.HVP_DELTA)
        sides = []
        for sign in (1.0, -1.0):
            probe = {
                name: Tensor(
                    t.data + (sign * eps * x).astype(t.dtype),
                    requires_grad=False,
                    name=name,
                )
                for name, t, x in zip(names, theta, v)
            }
            sides.append(_phi_t_gradient(state, train_batch, config, tctx, probe).astype(np.float64))
        mv = (sides[0] - sides[1]) / (2.0 * eps)
        hyper = (-config.eta_inner * mv).astype(state.phi_t.dtype)

    state.phi_t.data = state.phi_t.data - config.eta_outer * hyper
    return state


# ---------------------------------------------------------------------------
# evaluation helpers


def simulate_predictions(
    student: MiniTransformer,
    tctx: TeacherContext,
    examples: Sequence[Example],
) -> tuple[list, list]:
    preds = [student.predict(ex.token_ids) for ex in examples]
    targets = [tctx.target(ex.token_ids) for ex in examples]
    return preds, targets


def simulability(
    student: MiniTransformer,
    tctx: TeacherContext,
    examples: Sequence[Example],
) -> float:
    """Prediction agreement with the teacher: accuracy or Pearson."""
    preds, targets = simulate_predictions(student, tctx, examples)
    if student.config.task == "classification":
        return simulability_accuracy(preds, targets)
    return simulability_pearson(preds, targets)


def count_active_heads(phi_t: Tensor, normalize: str) -> int:
    with ad.no_grad():
        lam = normalize_coefficients(phi_t, normalize)
    return int(np.count_nonzero(lam.data))


def _sample_batch(rng: np.random.Generator, pool: Sequence[Example], size: int) -> list[Example]:
    idx = rng.integers(0, len(pool), size=min(size, len(pool)))
    return [pool[int(i)] for i in idx]


def train(
    config: TrainConfig,
    teacher: MiniTransformer,
    splits: Splits,
    student_config: ModelConfig,
) -> TrainResult:
    """Full student training run; deterministic given the config seed.

    Inner steps draw batches from the train split; in smat mode each
    inner step is followed by one outer step whose held-out batch comes
    from the dev split. Logs train loss, dev simulability, and the
    number of active teacher-head coefficients at every ``eval_every``
    steps.
    """
    if not splits.train or not splits.dev:
        raise ValueError("train and dev splits must be non-empty")
    for name, part in (("train", splits.train), ("dev", splits.dev)):
        for ex in part:
            if ex.token_ids is None:
                raise ValueError(f"{name} split has examples without token ids")

    tctx = TeacherContext(teacher, config)
    student = MiniTransformer(student_config, seed=config.seed, dtype=teacher.dtype)
    scope = config.explainer_scope()
    phi_s = Tensor(
        np.zeros(len(scope_head_indices(student, scope)), dtype=student.dtype),
        requires_grad=True,
        name="phi_s",
    )
    teacher_scope_size = len(scope_head_indices(teacher, tctx.scope))
    phi_t = Tensor(
        np.zeros(teacher_scope_size, dtype=teacher.dtype),
        requires_grad=True,
        name="phi_t",
    )
    state = TrainState(student=student, phi_s=phi_s, phi_t=phi_t)
    rng_inner = np.random.default_rng([config.seed, 0])
    rng_outer = np.random.default_rng([config.seed, 1])
    smat = config.mode_kind() == "smat"

    log: list[TrainRecord] = []
    for step in range(1, config.steps + 1):
        batch = _sample_batch(rng_inner, splits.train, config.batch_size)
        inner_step(state, batch, config, tctx)
        if smat:
            outer_batch = _sample_batch(rng_outer, splits.dev, config.batch_size)
            outer_step(state, batch, outer_batch, config, tctx)
        if step % config.eval_every == 0 or step == config.steps:
            try:
                dev_sim = simulability(student, tctx, splits.dev)
            except ValueError:
                dev_sim = None
            log.append(
                TrainRecord(
                    step=step,
                    train_loss=state.last_loss,
                    dev_simulability=dev_sim,
                    active_heads=count_active_heads(state.phi_t, config.normalize),
                )
            )
    return TrainResult(student=student, phi_s=state.phi_s, phi_t=state.phi_t, log=log)


# ---------------------------------------------------------------------------
# supervised teacher training


def train_supervised(
    model: MiniTransformer,
    examples: Sequence[Example],
    lr: float = 0.1,
    momentum: float = 0.9,
    steps: int = 500,
    batch_size: int = 32,
    seed: int = 0,
) -> list[float]:
    """SGD with momentum on gold labels; returns per-step mean losses."""
    if not examples:
        raise ValueError("no training examples")
    for ex in examples:
        if ex.token_ids is None:
            raise ValueError("examples must carry token ids")
    rng = np.random.default_rng([seed, 2])
    names = model.param_names()
    velocity = {name: np.zeros_like(model.params[name].data) for name in names}
    losses: list[float] = []
    for _ in range(steps):
        batch = _sample_batch(rng, examples, batch_size)
        terms = []
        for ex in batch:
            out = model.forward(ex.token_ids)
            if model.config.task == "classification":
                terms.append(ad.cross_entropy(out, int(ex.label)))
            else:
                target = ad.constant(np.asarray(ex.score, dtype=out.dtype))
                diff = ad.sub(out, target)
                terms.append(ad.mul(diff, diff))
        total = terms[0]
        for term in terms[1:]:
            total = ad.add(total, term)
        loss = ad.mul(total, ad.constant(np.asarray(1.0 / len(terms), dtype=total.dtype)))
        grads = ad.backward(loss, model.param_list())
        for name, p, g in zip(names, model.param_list(), grads):
            velocity[name] = momentum * velocity[name] + g.data
            p.data = p.data - lr * velocity[name]
        losses.append(loss.item())
    return losses


def gold_accuracy(model: MiniTransformer, examples: Sequence[Example]) -> float:
    preds = [model.predict(ex.token_ids) for ex in examples]
    golds = [ex.label for ex in examples]
    return simulability_accuracy(preds, golds)
