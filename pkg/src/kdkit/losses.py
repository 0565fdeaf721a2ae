"""Distillation criteria and the composite loss over captured I/O dictionaries.

Every criterion exposes forward(z_S, z_T, y); criteria that don't use the
teacher operand or the target simply ignore them. The composite loss sums
factor-weighted terms whose operands are fetched from the student/teacher
I/O dictionaries per the configured bindings.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import (
    InvalidTemperatureError,
    NonFiniteLossError,
    ShapeMismatchError,
    ZeroNormError,
)
from .registry import Registry, default_registry, register_loss
from .utils import strict_mode

EPS = 1e-12


def _as_float_tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(x, dtype=torch.float32)


def _as_logit_batch(z, y):
    """Promote single-sample (vector) logits and scalar labels to batch form."""
    z = _as_float_tensor(z)
    if z.dim() == 1:
        z = z.unsqueeze(0)
    if y is None:
        return z, None
    y = torch.as_tensor(y, dtype=torch.long)
    if y.dim() == 0:
        y = y.unsqueeze(0)
    return z, y


def _l2_normalize_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(p=2, dim=1, keepdim=True)
    if strict_mode() and bool((norms == 0).any()):
        raise ZeroNormError(f"zero L2 norm in {what}")
    return x / (norms + EPS)


# --- functional criteria ---------------------------------------------------------

def kd_loss(z_S, z_T, y, temperature: float = 1.0, alpha: float = 0.5,
            reduction: str = "batchmean"):
    """alpha * T^2 * KL(softmax(z_T/T) || softmax(z_S/T)) + (1-alpha) * CE(z_S, y).

    The teacher logits never carry gradient. reduction applies to the KL term;
    'batchmean' averages it over the batch dimension.
    """
    if temperature <= 0:
        raise InvalidTemperatureError(f"temperature must be > 0, got {temperature}")
    z_S, y = _as_logit_batch(z_S, y)
    z_T, _ = _as_logit_batch(z_T, None)
    if z_S.shape != z_T.shape:
        raise ShapeMismatchError(f"logit shapes differ: {tuple(z_S.shape)} vs {tuple(z_T.shape)}")
    z_T = z_T.detach()
    log_p_s = F.log_softmax(z_S / temperature, dim=-1)
    p_t = F.softmax(z_T / temperature, dim=-1)
    if strict_mode():
        for probs in (p_t, log_p_s.exp()):
            if not bool(((probs.sum(dim=-1) - 1.0).abs() < 1e-6).all()):
                raise ZeroNormError("softmax rows do not sum to 1 within 1e-6")
    soft = F.kl_div(log_p_s, p_t, reduction=reduction)
    if alpha == 1.0:
        return alpha * (temperature ** 2) * soft
    hard = F.cross_entropy(z_S, y)
    return alpha * (temperature ** 2) * soft + (1.0 - alpha) * hard


def attention_map(feature_map, exponent: float = 2.0) -> torch.Tensor:
    """Channel-collapsed spatial energy: sum_c |F_c|^exponent, vectorized.

    (C, H, W) -> (H*W,); (B, C, H, W) -> (B, H*W).
    """
    fm = _as_float_tensor(feature_map)
    if fm.dim() == 3:
        return fm.abs().pow(exponent).sum(dim=0).flatten()
    if fm.dim() == 4:
        return fm.abs().pow(exponent).sum(dim=1).flatten(1)
    raise ShapeMismatchError(f"attention_map expects (C,H,W) or (B,C,H,W), got {tuple(fm.shape)}")


def _map_pairs(Q_S, Q_T):
    def listify(Q):
        if torch.is_tensor(Q):
            return [Q]
        if isinstance(Q, (list, tuple)) and Q and torch.is_tensor(Q[0]):
            return list(Q)
        return [_as_float_tensor(Q)]

    qs, qt = listify(Q_S), listify(Q_T)
    if len(qs) != len(qt):
        raise ShapeMismatchError(f"attention map counts differ: {len(qs)} vs {len(qt)}")
    return qs, qt


def at_loss(variant: str, Q_S, Q_T, beta: float = 1000.0, p: float = 2.0):
    """Attention-matching loss over one or more map pairs.

    Maps are flattened per sample and L2-normalized; 'norm_diff' takes the
    per-sample p-norm of the difference (batch-averaged), 'mse' the mean
    squared error over all elements. Result is (beta/2) * sum over pairs.
    """
    if variant not in ("norm_diff", "mse"):
        raise ValueError(f"unknown attention loss variant {variant!r}")
    qs_list, qt_list = _map_pairs(Q_S, Q_T)
    total = None
    for q_s, q_t in zip(qs_list, qt_list):
        q_s = _as_float_tensor(q_s)
        q_t = _as_float_tensor(q_t)
        q_s = q_s.unsqueeze(0) if q_s.dim() == 1 else q_s.flatten(1)
        q_t = q_t.unsqueeze(0) if q_t.dim() == 1 else q_t.flatten(1)
        if q_s.shape != q_t.shape:
            raise ShapeMismatchError(
                f"attention map shapes differ: {tuple(q_s.shape)} vs {tuple(q_t.shape)}")
        q_s = _l2_normalize_rows(q_s, "student attention map")
        q_t = _l2_normalize_rows(q_t, "teacher attention map")
        if variant == "mse":
            value = F.mse_loss(q_s, q_t)
        else:
            value = (q_s - q_t).norm(p=p, dim=1).mean()
        total = value if total is None else total + value
    return (beta / 2.0) * total


def ft_loss(z_S, z_T, p: float = 1.0):
    """p-norm between L2-normalized factors, per sample, averaged over batch."""
    z_s = _as_float_tensor(z_S)
    z_t = _as_float_tensor(z_T)
    z_s = z_s.unsqueeze(0) if z_s.dim() == 1 else z_s.flatten(1)
    z_t = z_t.unsqueeze(0) if z_t.dim() == 1 else z_t.flatten(1)
    if z_s.shape != z_t.shape:
        raise ShapeMismatchError(f"factor shapes differ: {tuple(z_s.shape)} vs {tuple(z_t.shape)}")
    z_s = _l2_normalize_rows(z_s, "student factor")
    z_t = _l2_normalize_rows(z_t, "teacher factor")
    return (z_s - z_t).norm(p=p, dim=1).mean()


def hint_loss(h_S, h_T):
    """Mean squared error between a regressed student hint and the teacher hint."""
    h_s = _as_float_tensor(h_S)
    h_t = _as_float_tensor(h_T)
    if h_s.shape != h_t.shape:
        raise ShapeMismatchError(f"hint shapes differ: {tuple(h_s.shape)} vs {tuple(h_t.shape)}")
    return F.mse_loss(h_s, h_t)


# --- criterion classes -------------------------------------------------------------

@register_loss("CrossEntropyLoss")
class CrossEntropyLoss:
    def __init__(self, reduction: str = "mean"):
        self.reduction = reduction

    def __call__(self, z_S, z_T, y):
        z_S, y = _as_logit_batch(z_S, y)
        return F.cross_entropy(z_S, y, reduction=self.reduction)


@register_loss("KDLoss")
class KDLoss:
    def __init__(self, temperature: float = 1.0, alpha: float = 0.5,
                 reduction: str = "batchmean"):
        if temperature <= 0:
            raise InvalidTemperatureError(f"temperature must be > 0, got {temperature}")
        self.temperature = float(temperature)
        self.alpha = float(alpha)
        self.reduction = reduction

    def __call__(self, z_S, z_T, y):
        return kd_loss(z_S, z_T, y, self.temperature, self.alpha, self.reduction)


@register_loss("ATLoss")
class ATLoss:
    """Feature maps in, attention matching out; raw 3-d/4-d inputs are first
    collapsed by attention_map with the configured exponent."""

    def __init__(self, variant: str = "mse", beta: float = 1000.0, p: float = 2.0,
                 exponent: float = 2.0):
        if variant not in ("norm_diff", "mse"):
            raise ValueError(f"unknown attention loss variant {variant!r}")
        self.variant = variant
        self.beta = float(beta)
        self.p = float(p)
        self.exponent = float(exponent)

    def _maps(self, feats):
        feats = feats if isinstance(feats, (list, tuple)) else [feats]
        out = []
        for f in feats:
            f = _as_float_tensor(f)
            out.append(attention_map(f, self.exponent) if f.dim() >= 3 else f)
        return out

    def __call__(self, z_S, z_T, y):
        return at_loss(self.variant, self._maps(z_S), self._maps(z_T), self.beta, self.p)


@register_loss("FTLoss")
class FTLoss:
    def __init__(self, p: float = 1.0):
        self.p = float(p)

    def __call__(self, z_S, z_T, y):
        return ft_loss(z_S, z_T, self.p)


@register_loss("MSELoss")
@register_loss("HintLoss")
class HintLoss:
    def __call__(self, z_S, z_T, y):
        return hint_loss(z_S, z_T)


# --- composite ---------------------------------------------------------------------

def _fetch(io, binding):
    if binding.paths:
        return [io.get(p, binding.io) for p in binding.paths]
    return io.get(binding.path, binding.io, binding.index)


@register_loss("GeneralizedCustomLoss")
class GeneralizedCustomLoss:
    """Sum of factor-weighted criterion terms over the two I/O dictionaries.

    The org term applies its criterion to the final model outputs; each sub
    term fetches its operands per its bindings. Construction resolves every
    term criterion from the registry once.
    """

    def __init__(self, spec, registry: Registry | None = None):
        registry = registry or default_registry
        self.spec = spec
        self._criteria = {}
        terms = list(spec.sub_terms)
        if spec.org_term is not None:
            terms.append(spec.org_term)
        for term in terms:
            self._criteria[term.name] = registry.instantiate(
                "loss", term.criterion_type, dict(term.criterion_params))

    def term_values(self, io_S, io_T, targets) -> dict:
        values = {}
        if self.spec.org_term is not None:
            term = self.spec.org_term
            values[term.name] = self._criteria[term.name](
                io_S.model_output, io_T.model_output,
                targets if term.uses_target else None)
        for term in self.spec.sub_terms:
            a = _fetch(io_S if term.student_binding.model == "student" else io_T,
                       term.student_binding) if term.student_binding is not None else None
            b = _fetch(io_T if term.teacher_binding.model == "teacher" else io_S,
                       term.teacher_binding) if term.teacher_binding is not None else None
            values[term.name] = self._criteria[term.name](
                a, b, targets if term.uses_target else None)
        return values

    def __call__(self, io_S, io_T, targets):
        values = self.term_values(io_S, io_T, targets)
        total = torch.zeros(())
        finished = {}
        for term in ([self.spec.org_term] if self.spec.org_term else []) + list(self.spec.sub_terms):
            value = values[term.name]
            scalar = float(value.detach()) if torch.is_tensor(value) else float(value)
            if not torch.isfinite(torch.tensor(scalar)):
                raise NonFiniteLossError(term.name, scalar, finished)
            finished[term.name] = scalar
            total = total + term.factor * value
        return total


def composite_loss(io_S, io_T, targets, spec, registry: Registry | None = None):
    return GeneralizedCustomLoss(spec, registry)(io_S, io_T, targets)
