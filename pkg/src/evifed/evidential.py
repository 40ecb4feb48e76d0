"""Dirichlet evidence, belief masses, uncertainty and the evidential loss.

Evidence comes from an exp activation on the head logits.  With
``alpha = evidence + 1`` and strength ``S = sum(alpha)``:

    belief_j = evidence_j / S,   uncertainty = J / S = 1 - sum(belief)

The loss is the expected cross-entropy under Dir(alpha),
``psi(S) - psi(alpha_true)``, plus ``lam * KL[Dir(alpha_hat) || Dir(1)]`` where
``alpha_hat`` resets the true-class entry to 1 so correct evidence is never
penalised.  Loss functions take a single vector or an ``(N, J)`` batch and
return one value per instance; :func:`total_loss` averages over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evifed import autodiff as ad
from evifed import special
from evifed.autodiff import Tensor
from evifed.errors import DomainError, InvalidInputError


@dataclass(frozen=True)
class EvidentialOutput:
    evidence: np.ndarray
    alpha: np.ndarray
    strength: np.ndarray
    belief: np.ndarray
    uncertainty: np.ndarray

    def prediction(self) -> np.ndarray:
        return np.argmax(self.belief, axis=-1)


@dataclass
class LossConfig:
    lam: float = 0.1
    lambda_ramp: int | None = None

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise DomainError(f"lambda must be nonnegative, got {self.lam}")
        if self.lambda_ramp is not None and self.lambda_ramp < 1:
            raise DomainError(f"lambda_ramp must be >= 1 epoch, got {self.lambda_ramp}")

    def effective_lambda(self, epoch: int = 0) -> float:
        """Linear ramp 0 -> lam over ``lambda_ramp`` epochs when enabled."""
        if self.lambda_ramp is None:
            return self.lam
        return self.lam * min(1.0, epoch / self.lambda_ramp)


def evidential_output(logits, ceiling: float = ad.EVIDENCE_CEILING) -> EvidentialOutput:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    if z.size == 0 or not np.all(np.isfinite(z)):
        raise InvalidInputError("evidential_output needs finite, non-empty logits")
    evidence = np.exp(np.minimum(z, ceiling))
    alpha = evidence + 1.0
    strength = alpha.sum(axis=-1)
    s = strength[..., None]
    return EvidentialOutput(
        evidence=evidence,
        alpha=alpha,
        strength=strength,
        belief=evidence / s,
        uncertainty=z.shape[-1] / strength,
    )


def _check_onehot(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != n_classes:
        raise InvalidInputError(f"label width {y.shape[-1]} != {n_classes} classes")
    binary = np.all((y == 0.0) | (y == 1.0))
    if not binary or not np.all(y.sum(axis=-1) == 1.0):
        raise InvalidInputError("labels must be one-hot")
    return y


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def _check_alpha(alpha: Tensor, floor: float, op: str) -> None:
    if np.any(alpha.data < floor - 1e-12):
        raise DomainError(f"{op}: Dirichlet parameters must be >= {floor}")


def unc_loss(alpha, y) -> Tensor:
    """sum_j y_j (psi(S) - psi(alpha_j)), per instance."""
    alpha = ad.as_tensor(alpha)
    y = _check_onehot(y, alpha.shape[-1])
    _check_alpha(alpha, 1.0, "unc_loss")
    strength = ad.sum_axis(alpha, -1)
    picked = ad.sum_axis(ad.mul(ad.digamma(alpha), Tensor(y)), -1)
    return ad.sub(ad.digamma(strength), picked)


def alpha_hat(alpha, y) -> Tensor:
    alpha = ad.as_tensor(alpha)
    y = _check_onehot(y, alpha.shape[-1])
    return ad.add(Tensor(y), ad.mul(Tensor(1.0 - y), alpha))


def kl_regularizer(alpha_hat_) -> Tensor:
    """KL[Dir(alpha_hat) || Dir(1)], per instance."""
    a = ad.as_tensor(alpha_hat_)
    _check_alpha(a, 1.0, "kl_regularizer")
    n_classes = a.shape[-1]
    strength = ad.sum_axis(a, -1)
    log_norm = ad.sub(ad.lgamma(strength), ad.sum_axis(ad.lgamma(a), -1))
    dig_s = ad.digamma(strength)
    if a.data.ndim == 1:
        dig_s_rows = ad.concat([ad.reshape(dig_s, (1,))] * n_classes, axis=0)
    else:
        dig_s_rows = ad.concat([ad.reshape(dig_s, (-1, 1))] * n_classes, axis=1)
    ones = np.ones(a.shape)
    cross = ad.sum_axis(ad.mul(ad.sub(a, Tensor(ones)), ad.sub(ad.digamma(a), dig_s_rows)), -1)
    const = Tensor(np.full(strength.shape, special.lgamma(float(n_classes))))
    return ad.add(ad.sub(log_norm, const), cross)


def total_loss(alpha, y, cfg: LossConfig | None = None, epoch: int = 0) -> Tensor:
    """Batch-mean of unc_loss + lambda_eff * kl_regularizer(alpha_hat)."""
    cfg = cfg or LossConfig()
    alpha = ad.as_tensor(alpha)
    per = unc_loss(alpha, y)
    lam = cfg.effective_lambda(epoch)
    if lam != 0.0:
        per = ad.add(per, ad.scale(kl_regularizer(alpha_hat(alpha, y)), lam))
    return ad.mean_all(per) if per.data.ndim else per


def alpha_from_logits(logits: Tensor, ceiling: float = ad.EVIDENCE_CEILING) -> Tensor:
    evidence = ad.exp_activation(logits, ceiling)
    return ad.add(evidence, Tensor(np.ones(evidence.shape)))


def dirichlet_mean_loglik(alpha: Tensor, labels) -> Tensor:
    """sum over instances of log(alpha_true / S)."""
    alpha = ad.as_tensor(alpha)
    y = one_hot(labels, alpha.shape[-1]) if np.ndim(labels) == alpha.data.ndim - 1 else labels
    y = _check_onehot(y, alpha.shape[-1])
    picked = ad.sum_axis(ad.mul(alpha, Tensor(y)), -1)
    strength = ad.sum_axis(alpha, -1)
    return ad.sum_all(ad.sub(ad.log(picked), ad.log(strength)))
