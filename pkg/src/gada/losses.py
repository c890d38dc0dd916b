"""Training objectives, every one a scalar to minimize.

Covers supervised classification conditioned on the real classes, the domain
discriminator's cross-entropy, the unsupervised fictitious-class terms, the
generator's feature-matching distance, prediction entropy, and virtual
adversarial training with its power-iteration perturbation solver.

Sign convention: likelihood-style objectives are returned negated, so a
smaller value is always better.  The one exception in spirit is loss_domain,
which is returned exactly as defined (the discriminator minimizes it, the
feature extractor maximizes it); the trainer subtracts it with its weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gada.autodiff import ContractError, Tensor
from gada.nets import (
    PROB_EPS,
    ClassifierModel,
    DiscriminatorModel,
    GeneratorModel,
    forward_classifier,
    forward_discriminator,
    forward_generator,
)


@dataclass
class VatConfig:
    """Perturbation radius, probe scale, and power-iteration count."""

    epsilon: float
    xi: float = 1e-1
    power_iterations: int = 1

    def __post_init__(self):
        if self.epsilon < 0:
            raise ContractError("vat epsilon must be >= 0")
        if self.xi <= 0:
            raise ContractError("vat xi must be positive")
        if self.power_iterations < 1:
            raise ContractError("vat needs at least one power iteration")


@dataclass
class LossWeights:
    """Term weights; zero disables a term's influence (toggles skip it outright)."""

    lambda_d: float = 1e-2
    lambda_s: float = 1.0
    lambda_t: float = 1e-2
    lambda_u: float = 1.0

    def __post_init__(self):
        for name in ("lambda_d", "lambda_s", "lambda_t", "lambda_u"):
            if getattr(self, name) < 0:
                raise ContractError("%s must be nonnegative" % name)


def class_distribution(model: ClassifierModel, x: Tensor, frozen: bool = False) -> Tensor:
    """Softmax over all K+1 outputs; frozen=True blocks gradients into the model."""
    logits, _, _ = forward_classifier(model, x, frozen=frozen)
    return logits.softmax()


def loss_classification(model: ClassifierModel, x_S: Tensor, y_S,
                        logits: Tensor | None = None) -> Tensor:
    """Mean negative log of the class posterior renormalized over the K real
    classes; the fictitious output never receives supervised labels.

    ``logits`` may carry a precomputed forward pass of x_S so callers
    combining several objective terms on one batch share a single tape.
    """
    y = np.asarray(y_S, dtype=np.int64)
    if y.ndim != 1 or y.shape[0] != x_S.data.shape[0]:
        raise ContractError("labels must be one per sample")
    if y.min() < 1 or y.max() > model.K:
        raise ContractError("labels must lie in 1..K=%d" % model.K)
    if logits is None:
        logits, _, _ = forward_classifier(model, x_S)
    cond_log_prob = logits.slice_cols(0, model.K).log_softmax().gather(y - 1)
    return -cond_log_prob.mean()


def loss_domain(disc: DiscriminatorModel, feats_S: Tensor, feats_T: Tensor,
                frozen_disc: bool = False) -> Tensor:
    """mean_S[log D] + mean_T[log(1-D)], exactly as defined (not negated).

    D reads as probability-of-target, so the discriminator's minimum drives
    D(source) toward 0; the feature extractor pushes the other way.  When the
    extractor side is being trained, pass frozen_disc=True so the
    discriminator's own weights stay out of the tape.
    """
    if feats_S.data.shape[0] != feats_T.data.shape[0]:
        raise ContractError(
            "domain loss expects equal batch sizes, got %d and %d"
            % (feats_S.data.shape[0], feats_T.data.shape[0]))
    d_S = forward_discriminator(disc, feats_S, frozen=frozen_disc)
    d_T = forward_discriminator(disc, feats_T, frozen=frozen_disc)
    return d_S.log().mean() + (1.0 - d_T).log().mean()


def loss_unsupervised(model: ClassifierModel, x_T: Tensor, x_gen: Tensor,
                      logits_T: Tensor | None = None) -> Tensor:
    """Real target mass on the K real classes, generated mass on class K+1.

    Returns the negated log-likelihood sum, so 0 is the optimum.  The
    generated batch enters as constants: this loss trains the classifier
    only, never the generator.  ``logits_T`` optionally reuses a forward
    pass of x_T.
    """
    if logits_T is None:
        probs_T = class_distribution(model, x_T)
    else:
        probs_T = logits_T.softmax()
    real_mass = probs_T.slice_cols(0, model.K).sum(axis=1)
    probs_gen = class_distribution(model, x_gen.detach())
    fake_mass = probs_gen.slice_cols(model.K, model.K + 1).sum(axis=1)
    t_real = real_mass.clamp(PROB_EPS, 1.0 - PROB_EPS).log().mean()
    t_fake = fake_mass.clamp(PROB_EPS, 1.0 - PROB_EPS).log().mean()
    return -(t_real + t_fake)


def loss_feature_matching(model: ClassifierModel, gen: GeneratorModel,
                          x_T: Tensor, z: Tensor) -> Tensor:
    """Euclidean distance between mean phi activations of real and generated
    batches.  The classifier is evaluated frozen on both branches, so the
    gradient reaches the generator alone; real-batch statistics are constants.
    """
    if x_T.data.shape[0] < 1 or z.data.shape[0] < 1:
        raise ContractError("feature matching needs nonempty batches")
    _, _, phi_real = forward_classifier(model, x_T, frozen=True)
    x_g = forward_generator(gen, z)
    _, _, phi_gen = forward_classifier(model, x_g, frozen=True)
    diff = phi_real.mean(axis=0) - phi_gen.mean(axis=0)
    return diff.l2norm()


def loss_entropy(model: ClassifierModel, x: Tensor,
                 logits: Tensor | None = None) -> Tensor:
    """Mean Shannon entropy of the full (K+1)-way prediction, in [0, ln(K+1)].

    ``logits`` optionally reuses a forward pass of x.
    """
    if logits is None:
        logits, _, _ = forward_classifier(model, x)
    p = logits.softmax()
    log_p = logits.log_softmax()
    return -(p * log_p).sum(axis=1).mean()


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Row-wise KL(p||q) for distributions along axis 1.

    The outer p factor stays raw while both logs see clamped arguments, so
    KL of a distribution against itself is exactly zero.
    """
    if p.data.shape != q.data.shape or p.data.ndim != 2:
        raise ContractError("kl_divergence expects matching [B,C] tensors")
    for name, t in (("p", p), ("q", q)):
        sums = t.data.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-9:
            raise ContractError("%s rows must sum to 1 within 1e-9" % name)
    log_p = p.clamp(PROB_EPS, 1.0 - PROB_EPS).log()
    log_q = q.clamp(PROB_EPS, 1.0 - PROB_EPS).log()
    return (p * (log_p - log_q)).sum(axis=1)


def vat_perturbation(model: ClassifierModel, x: Tensor, cfg: VatConfig,
                     rng: np.random.Generator,
                     reference: np.ndarray | None = None) -> Tensor:
    """Per-sample adversarial direction of norm epsilon via power iteration.

    Starts from a normalized random probe; each iteration replaces the probe
    with the normalized gradient of KL(f(x) || f(x + xi*probe)) with respect
    to the probe, computed in log-space so confident predictions keep a
    usable tail gradient.  Rows whose gradient vanishes (a locally constant
    classifier) keep their current random direction.  The probe only sees
    curvature at scale xi, which says nothing about which of the two signed
    directions hurts more at the full radius, so both are evaluated and the
    worse one for the classifier wins.

    ``reference`` optionally supplies the model's class distribution at x,
    saving one forward pass when the caller has it already.
    """
    x_const = x.detach()
    n, dim = x_const.data.shape
    d = rng.standard_normal((n, dim))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    if cfg.epsilon == 0.0:
        return Tensor(np.zeros((n, dim)))
    if reference is None:
        logits0, _, _ = forward_classifier(model, x_const, frozen=True)
        log_p0 = logits0.log_softmax().data
    else:
        log_p0 = np.log(reference)
    p0 = Tensor(np.exp(log_p0))
    for _ in range(cfg.power_iterations):
        probe = Tensor(d, requires_grad=True)
        logits, _, _ = forward_classifier(model, x_const + probe * cfg.xi,
                                          frozen=True)
        row_kl = (p0 * (Tensor(log_p0) - logits.log_softmax())).sum(axis=1)
        row_kl.mean().backprop()
        g = probe.grad
        if g is None:
            break
        norms = np.linalg.norm(g, axis=1, keepdims=True)
        live = norms[:, 0] > 1e-12
        d = np.where(live[:, None], g / np.maximum(norms, 1e-12), d)
    q_plus = class_distribution(model, Tensor(x_const.data + cfg.epsilon * d),
                                frozen=True)
    q_minus = class_distribution(model, Tensor(x_const.data - cfg.epsilon * d),
                                 frozen=True)
    gain_plus = kl_divergence(p0, q_plus).data
    gain_minus = kl_divergence(p0, q_minus).data
    d = np.where((gain_plus >= gain_minus)[:, None], d, -d)
    return Tensor(cfg.epsilon * d)


def loss_vat(model: ClassifierModel, x: Tensor, cfg: VatConfig,
             rng: np.random.Generator, perturbation: Tensor | None = None,
             reference=None) -> Tensor:
    """Mean KL between current predictions and predictions under the
    adversarial perturbation.  The unperturbed side is a constant: only the
    perturbed branch carries gradient.

    ``perturbation`` and ``reference`` let callers freeze the internally
    generated quantities (both are gradient-blocked by construction), which
    finite-difference checks need in order to probe only the live path.
    """
    if reference is None:
        ref = Tensor(class_distribution(model, x, frozen=True).data)
    else:
        ref = Tensor(np.asarray(reference, dtype=np.float64))
    if perturbation is None:
        r = vat_perturbation(model, x, cfg, rng, reference=ref.data)
    else:
        r = perturbation
    q = class_distribution(model, x.detach() + r.detach())
    return kl_divergence(ref, q).mean()
