"""Three-player alternating optimization, refinement, and run bookkeeping.

One training step runs up to three sub-steps on fresh minibatches:

  S1  update the classifier (feature extractor g plus head h) on
      classification loss minus the weighted domain loss plus the enabled
      regularizers (unsupervised fictitious-class terms, virtual adversarial
      smoothing on both domains, target entropy);
  S2  update the domain discriminator on its own cross-entropy, with the
      features held constant;
  S3  update the generator on feature matching, with the classifier held
      constant.

S2 runs only when the domain loss is enabled, S3 only when the unsupervised
term is; a disabled toggle skips its forward pass entirely and contributes
exactly nothing.

Every random draw comes from a stateless stream keyed by (seed, site) with
the step counter as the stream position, so streams never interact: drawing
or skipping one site cannot shift another.  Sites in use:

  batch.s1.source  batch.s1.target   minibatch indices for S1
  s1.noise                           generator noise for the unsupervised term
  s1.vat_src  s1.vat_tgt             adversarial probe starts in S1
  batch.s2.source  batch.s2.target   minibatch indices for S2
  batch.s3.target  s3.noise          minibatch and noise for S3
  batch.dirt.target  dirt.vat        refinement batches and probes

The step counter persists through checkpoints, which is all the stream
state there is; resuming therefore replays the exact draw sequence of an
uninterrupted run.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from gada.autodiff import ContractError, Tensor, backward
from gada.data import DomainShiftDataset, batch_indices, instance_normalize
from gada.losses import (
    LossWeights,
    VatConfig,
    class_distribution,
    kl_divergence,
    loss_classification,
    loss_domain,
    loss_entropy,
    loss_feature_matching,
    loss_unsupervised,
    loss_vat,
)
from gada.nets import (
    AdamState,
    ClassifierModel,
    DiscriminatorModel,
    GeneratorModel,
    NetSpec,
    adam_step,
    forward_classifier,
    forward_generator,
    read_checkpoint,
    write_checkpoint,
)
from gada.rngstreams import site_rng


class TrainingAbort(RuntimeError):
    """A loss left the finite floats; training stops rather than drifts."""

    def __init__(self, loss_name: str, step: int, value: float):
        self.loss_name = loss_name
        self.step = step
        self.value = value
        super().__init__(
            "loss %s became non-finite (%r) at step %d"
            % (loss_name, value, step))


@dataclass
class HyperParams:
    """Everything a run depends on besides the dataset bytes.

    Toggles pick which objective terms exist at all; the lambda weights scale
    the enabled ones.  steps=0 is allowed and means evaluate-only.
    """

    weights: LossWeights = field(default_factory=LossWeights)
    lr_cls: float = 2e-4
    lr_disc: float = 2e-4
    lr_gen: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    steps: int = 3000
    vat: VatConfig = field(default_factory=lambda: VatConfig(epsilon=0.3))
    dirt_beta: float = 1e-2
    dirt_steps: int = 500
    dirt_refresh_interval: int = 50
    K: int = 2
    d_z: int = 16
    seed: int = 0
    instance_norm: bool = False
    use_domain: bool = True
    use_entropy: bool = True
    use_vat: bool = True
    use_unsupervised: bool = True
    eval_interval: int = 250
    g_hidden: tuple = (64, 64)
    h_hidden: tuple = (32,)
    disc_hidden: tuple = (32,)
    gen_hidden: tuple = (64, 64)
    disc_tap: str = "features"
    leak: float = 0.1

    def __post_init__(self):
        if not isinstance(self.weights, LossWeights):
            raise ContractError("weights must be a LossWeights")
        if not isinstance(self.vat, VatConfig):
            raise ContractError("vat must be a VatConfig")
        if self.batch_size < 2:
            raise ContractError("batch_size must be at least 2")
        if self.steps < 0 or self.dirt_steps < 0:
            raise ContractError("step counts must be nonnegative")
        for name in ("lr_cls", "lr_disc", "lr_gen"):
            if getattr(self, name) < 0:
                raise ContractError("%s must be nonnegative" % name)
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ContractError("%s must lie in [0, 1)" % name)
        if self.adam_eps <= 0:
            raise ContractError("adam_eps must be positive")
        if self.dirt_beta < 0:
            raise ContractError("dirt_beta must be nonnegative")
        if self.dirt_refresh_interval < 1:
            raise ContractError("dirt_refresh_interval must be at least 1")
        if self.K < 2:
            raise ContractError("need at least two classes")
        if self.d_z < 1:
            raise ContractError("d_z must be positive")
        if self.eval_interval < 1:
            raise ContractError("eval_interval must be at least 1")
        for name in ("g_hidden", "h_hidden", "disc_hidden", "gen_hidden"):
            widths = tuple(getattr(self, name))
            setattr(self, name, widths)
            if not widths or any(int(w) != w or w < 1 for w in widths):
                raise ContractError("%s must be positive widths" % name)
        if self.disc_tap not in ("features", "logits"):
            raise ContractError("disc_tap must be 'features' or 'logits'")
        if self.leak < 0:
            raise ContractError("leak must be nonnegative")


@dataclass
class NetBundle:
    """The three networks and one optimizer each."""

    classifier: ClassifierModel
    disc: DiscriminatorModel
    gen: GeneratorModel
    opt_cls: AdamState
    opt_disc: AdamState
    opt_gen: AdamState


@dataclass
class TrainState:
    """Mutable run state: networks, step counter, per-step loss traces."""

    hp: HyperParams
    bundle: NetBundle
    step: int = 0
    traces: list = field(default_factory=list)


def build_bundle(hp: HyperParams, input_dim: int) -> NetBundle:
    """Construct the networks and optimizers for a given input width."""
    if input_dim < 1:
        raise ContractError("input_dim must be positive")
    g_spec = NetSpec([input_dim, *hp.g_hidden], alpha=hp.leak, head="none")
    h_spec = NetSpec([hp.g_hidden[-1], *hp.h_hidden, hp.K + 1],
                     alpha=hp.leak, head="linear")
    classifier = ClassifierModel(g_spec, h_spec, hp.K, hp.seed)
    tap_dim = hp.g_hidden[-1] if hp.disc_tap == "features" else hp.K + 1
    disc = DiscriminatorModel(
        NetSpec([tap_dim, *hp.disc_hidden, 1], alpha=hp.leak, head="sigmoid"),
        hp.seed, tap=hp.disc_tap)
    gen = GeneratorModel(
        NetSpec([hp.d_z, *hp.gen_hidden, input_dim], alpha=hp.leak,
                head="tanh"),
        hp.seed)
    return NetBundle(
        classifier=classifier, disc=disc, gen=gen,
        opt_cls=AdamState(classifier.params, lr=hp.lr_cls,
                          beta1=hp.adam_beta1, beta2=hp.adam_beta2,
                          eps=hp.adam_eps),
        opt_disc=AdamState(disc.params, lr=hp.lr_disc, beta1=hp.adam_beta1,
                           beta2=hp.adam_beta2, eps=hp.adam_eps),
        opt_gen=AdamState(gen.params, lr=hp.lr_gen, beta1=hp.adam_beta1,
                          beta2=hp.adam_beta2, eps=hp.adam_eps))


def _prep(hp: HyperParams, x: np.ndarray) -> np.ndarray:
    return instance_normalize(x) if hp.instance_norm else x


def _record(trace: dict, name: str, value: Tensor, step: int) -> float:
    v = float(value.data)
    if not math.isfinite(v):
        raise TrainingAbort(name, step, v)
    trace[name] = v
    return v


def _tap_input(model: ClassifierModel, disc: DiscriminatorModel, x: Tensor,
               frozen: bool) -> Tensor:
    logits, feats, _ = forward_classifier(model, x, frozen=frozen)
    return feats if disc.tap == "features" else logits


def train_step(state: TrainState, dataset: DomainShiftDataset) -> TrainState:
    """One full alternation: S1, then S2 and S3 when their terms exist.

    Each sub-step draws its own fresh minibatches.  Aborts on the first
    non-finite loss value.
    """
    hp = state.hp
    w = hp.weights
    M = hp.batch_size
    n_s = dataset.source_x.shape[0]
    n_t = dataset.target_x.shape[0]
    if n_s < M or n_t < M:
        raise ContractError(
            "need at least batch_size=%d samples per domain, have %d source "
            "and %d target" % (M, n_s, n_t))
    bundle = state.bundle
    cls = bundle.classifier
    k = state.step
    step_no = k + 1
    trace = {"step": step_no}

    # S1: classifier against everything it owes.  One live forward per batch
    # side feeds every term that can share it.
    idx_s = batch_indices(n_s, M, hp.seed, "s1.source", k)
    idx_t = batch_indices(n_t, M, hp.seed, "s1.target", k)
    x_s = Tensor(_prep(hp, dataset.source_x[idx_s]))
    y_s = dataset.source_y[idx_s]
    logits_s, feats_s, _ = forward_classifier(cls, x_s)
    l_c = loss_classification(cls, x_s, y_s, logits=logits_s)
    _record(trace, "classification", l_c, step_no)
    objective = l_c
    need_target = (hp.use_domain or hp.use_unsupervised or hp.use_entropy
                   or hp.use_vat)
    if need_target:
        x_t = Tensor(_prep(hp, dataset.target_x[idx_t]))
        logits_t, feats_t, _ = forward_classifier(cls, x_t)
    # A zero-weight term is still computed for its trace but stays out of the
    # objective graph, so a lambda=0 run optimizes the byte-identical tape a
    # toggle-off run would.  Loose nodes cost nothing: backward never reaches
    # them.
    if hp.use_domain:
        tap_s = feats_s if bundle.disc.tap == "features" else logits_s
        tap_t = feats_t if bundle.disc.tap == "features" else logits_t
        l_d = loss_domain(bundle.disc, tap_s, tap_t, frozen_disc=True)
        _record(trace, "domain", l_d, step_no)
        if w.lambda_d != 0.0:
            objective = objective - w.lambda_d * l_d
    if hp.use_unsupervised:
        z = site_rng(hp.seed, "s1.noise", k).standard_normal((M, hp.d_z))
        x_gen = forward_generator(bundle.gen, Tensor(z), frozen=True)
        l_u = loss_unsupervised(cls, x_t, x_gen, logits_T=logits_t)
        _record(trace, "unsupervised", l_u, step_no)
        if w.lambda_u != 0.0:
            objective = objective + w.lambda_u * l_u
    if hp.use_vat:
        l_vs = loss_vat(cls, x_s, hp.vat, site_rng(hp.seed, "s1.vat_src", k),
                        reference=logits_s.softmax().data)
        l_vt = loss_vat(cls, x_t, hp.vat, site_rng(hp.seed, "s1.vat_tgt", k),
                        reference=logits_t.softmax().data)
        _record(trace, "vat_source", l_vs, step_no)
        _record(trace, "vat_target", l_vt, step_no)
        if w.lambda_s != 0.0:
            objective = objective + w.lambda_s * l_vs
        if w.lambda_t != 0.0:
            objective = objective + w.lambda_t * l_vt
    if hp.use_entropy:
        l_e = loss_entropy(cls, x_t, logits=logits_t)
        _record(trace, "entropy", l_e, step_no)
        if w.lambda_t != 0.0:
            objective = objective + w.lambda_t * l_e
    _record(trace, "objective", objective, step_no)
    adam_step(cls.params, backward(objective, cls.params), bundle.opt_cls)

    # S2: discriminator on fixed features.
    if hp.use_domain:
        idx_s2 = batch_indices(n_s, M, hp.seed, "s2.source", k)
        idx_t2 = batch_indices(n_t, M, hp.seed, "s2.target", k)
        tap_s2 = _tap_input(cls, bundle.disc,
                            Tensor(_prep(hp, dataset.source_x[idx_s2])),
                            frozen=True)
        tap_t2 = _tap_input(cls, bundle.disc,
                            Tensor(_prep(hp, dataset.target_x[idx_t2])),
                            frozen=True)
        l_d2 = loss_domain(bundle.disc, tap_s2, tap_t2, frozen_disc=False)
        _record(trace, "domain_disc", l_d2, step_no)
        adam_step(bundle.disc.params, backward(l_d2, bundle.disc.params),
                  bundle.opt_disc)

    # S3: generator chases the real feature statistics.
    if hp.use_unsupervised:
        idx_t3 = batch_indices(n_t, M, hp.seed, "s3.target", k)
        x_t3 = Tensor(_prep(hp, dataset.target_x[idx_t3]))
        z3 = site_rng(hp.seed, "s3.noise", k).standard_normal((M, hp.d_z))
        l_g = loss_feature_matching(cls, bundle.gen, x_t3, Tensor(z3))
        _record(trace, "feature_matching", l_g, step_no)
        adam_step(bundle.gen.params, backward(l_g, bundle.gen.params),
                  bundle.opt_gen)

    state.traces.append(trace)
    state.step = step_no
    return state


def evaluate(state: TrainState, test_x: np.ndarray, test_y: np.ndarray):
    """Accuracy and KxK confusion counts, predicting over real classes only.

    The fictitious class never wins at test time: predictions take the argmax
    of the first K logits.  confusion[i][j] counts true class i+1 predicted
    as class j+1.
    """
    test_x = np.asarray(test_x, dtype=np.float64)
    test_y = np.asarray(test_y)
    if test_x.shape[0] == 0:
        raise ContractError("cannot evaluate on an empty test set")
    K = state.hp.K
    if test_y.min() < 1 or test_y.max() > K:
        raise ContractError("test labels must lie in 1..%d" % K)
    x = Tensor(_prep(state.hp, test_x))
    logits, _, _ = forward_classifier(state.bundle.classifier, x, frozen=True)
    pred = np.argmax(logits.data[:, :K], axis=1) + 1
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (test_y - 1, pred - 1), 1)
    accuracy = float(np.trace(confusion)) / float(test_x.shape[0])
    return accuracy, confusion


@dataclass
class MetricsReport:
    """Deterministic run record; serializes to canonical JSON.

    Wall-clock timing deliberately lives elsewhere so these bytes depend
    only on (hyperparameters, dataset).
    """

    config: dict
    traces: list
    evaluations: list
    final_accuracy: float
    final_confusion: list

    def to_json(self) -> str:
        doc = {
            "config": self.config,
            "traces": self.traces,
            "evaluations": self.evaluations,
            "final_accuracy": self.final_accuracy,
            "final_confusion": self.final_confusion,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ": ")) + "\n"


def hp_to_dict(hp: HyperParams) -> dict:
    """Flat JSON-safe dict; round-trips exactly through hp_from_dict."""
    return {
        "lambda_d": hp.weights.lambda_d,
        "lambda_s": hp.weights.lambda_s,
        "lambda_t": hp.weights.lambda_t,
        "lambda_u": hp.weights.lambda_u,
        "lr_cls": hp.lr_cls,
        "lr_disc": hp.lr_disc,
        "lr_gen": hp.lr_gen,
        "adam_beta1": hp.adam_beta1,
        "adam_beta2": hp.adam_beta2,
        "adam_eps": hp.adam_eps,
        "batch_size": hp.batch_size,
        "steps": hp.steps,
        "vat_epsilon": hp.vat.epsilon,
        "vat_xi": hp.vat.xi,
        "vat_power_iterations": hp.vat.power_iterations,
        "dirt_beta": hp.dirt_beta,
        "dirt_steps": hp.dirt_steps,
        "dirt_refresh_interval": hp.dirt_refresh_interval,
        "K": hp.K,
        "d_z": hp.d_z,
        "seed": hp.seed,
        "instance_norm": hp.instance_norm,
        "use_domain": hp.use_domain,
        "use_entropy": hp.use_entropy,
        "use_vat": hp.use_vat,
        "use_unsupervised": hp.use_unsupervised,
        "eval_interval": hp.eval_interval,
        "g_hidden": list(hp.g_hidden),
        "h_hidden": list(hp.h_hidden),
        "disc_hidden": list(hp.disc_hidden),
        "gen_hidden": list(hp.gen_hidden),
        "disc_tap": hp.disc_tap,
        "leak": hp.leak,
    }


def hp_from_dict(d: dict) -> HyperParams:
    d = dict(d)
    weights = LossWeights(
        lambda_d=float(d.pop("lambda_d")), lambda_s=float(d.pop("lambda_s")),
        lambda_t=float(d.pop("lambda_t")), lambda_u=float(d.pop("lambda_u")))
    vat = VatConfig(
        epsilon=float(d.pop("vat_epsilon")), xi=float(d.pop("vat_xi")),
        power_iterations=int(d.pop("vat_power_iterations")))
    known = {f.name for f in fields(HyperParams)}
    unknown = set(d) - known
    if unknown:
        raise ContractError(
            "unknown hyperparameter keys: %s" % ", ".join(sorted(unknown)))
    for name in ("g_hidden", "h_hidden", "disc_hidden", "gen_hidden"):
        if name in d:
            d[name] = tuple(int(w) for w in d[name])
    return HyperParams(weights=weights, vat=vat, **d)


def _config_echo(hp: HyperParams, dataset: DomainShiftDataset) -> dict:
    return {"hyper": hp_to_dict(hp), "dataset": dataset.provenance}


def _run_report(state: TrainState, dataset: DomainShiftDataset,
                evaluations: list, confusion: np.ndarray) -> MetricsReport:
    return MetricsReport(
        config=_config_echo(state.hp, dataset),
        traces=list(state.traces),
        evaluations=list(evaluations),
        final_accuracy=evaluations[-1]["target_accuracy"],
        final_confusion=confusion.tolist())


def train(hp: HyperParams, dataset: DomainShiftDataset):
    """Fresh networks, hp.steps alternations, periodic target evaluation.

    Returns (final TrainState, MetricsReport).  With steps=0 the report
    holds just the evaluation of the untrained networks.
    """
    if hp.K != dataset.K:
        raise ContractError(
            "hyperparameters expect K=%d but dataset has K=%d"
            % (hp.K, dataset.K))
    state = TrainState(hp=hp, bundle=build_bundle(hp, dataset.d))
    accuracy, confusion = evaluate(state, dataset.test_x, dataset.test_y)
    evaluations = [{"step": 0, "target_accuracy": accuracy}]
    for _ in range(hp.steps):
        train_step(state, dataset)
        if state.step % hp.eval_interval == 0 or state.step == hp.steps:
            accuracy, confusion = evaluate(state, dataset.test_x,
                                           dataset.test_y)
            evaluations.append(
                {"step": state.step, "target_accuracy": accuracy})
    return state, _run_report(state, dataset, evaluations, confusion)


def _clone_classifier(model: ClassifierModel) -> ClassifierModel:
    clone = ClassifierModel(model.g_spec, model.h_spec, model.K, seed=0)
    for name, p in model.params.items():
        clone.params[name].data = p.data.copy()
    return clone


def _refresh_teacher(teacher: ClassifierModel, model: ClassifierModel) -> None:
    for name, p in model.params.items():
        teacher.params[name].data = p.data.copy()


def dirtt_refine(state: TrainState, dataset: DomainShiftDataset,
                 hp: HyperParams):
    """Target-only refinement against a periodically refreshed frozen teacher.

    Minimizes lambda_t*(vat + entropy) on target batches plus dirt_beta times
    the mean KL from the teacher's predictions to the student's.  The teacher
    snapshot is retaken every dirt_refresh_interval steps.  Source data is
    never touched.  The classifier optimizer continues with its moments but
    adopts hp.lr_cls.
    """
    bundle = state.bundle
    cls = bundle.classifier
    accuracy, confusion = evaluate(state, dataset.test_x, dataset.test_y)
    evaluations = [{"step": state.step, "target_accuracy": accuracy}]
    if hp.dirt_steps == 0:
        return state, _run_report(state, dataset, evaluations, confusion)
    n_t = dataset.target_x.shape[0]
    M = hp.batch_size
    if n_t < M:
        raise ContractError(
            "need at least batch_size=%d target samples, have %d" % (M, n_t))
    opt = bundle.opt_cls
    opt.lr = hp.lr_cls
    teacher = _clone_classifier(cls)
    for j in range(hp.dirt_steps):
        k = state.step
        step_no = k + 1
        if j % hp.dirt_refresh_interval == 0:
            _refresh_teacher(teacher, cls)
        idx = batch_indices(n_t, M, hp.seed, "dirt.target", k)
        x_t = Tensor(_prep(hp, dataset.target_x[idx]))
        trace = {"step": step_no}
        l_v = loss_vat(cls, x_t, hp.vat, site_rng(hp.seed, "dirt.vat", k))
        _record(trace, "vat_target", l_v, step_no)
        l_e = loss_entropy(cls, x_t)
        _record(trace, "entropy", l_e, step_no)
        p_teacher = class_distribution(teacher, x_t, frozen=True).data
        kl = kl_divergence(Tensor(p_teacher), class_distribution(cls, x_t)).mean()
        _record(trace, "teacher_kl", kl, step_no)
        objective = None
        if hp.weights.lambda_t != 0.0:
            objective = hp.weights.lambda_t * (l_v + l_e)
        if hp.dirt_beta != 0.0:
            anchor = hp.dirt_beta * kl
            objective = anchor if objective is None else objective + anchor
        if objective is None:
            trace["objective"] = 0.0
        else:
            _record(trace, "objective", objective, step_no)
            adam_step(cls.params, backward(objective, cls.params), opt)
        state.traces.append(trace)
        state.step = step_no
        if state.step % hp.eval_interval == 0 or j == hp.dirt_steps - 1:
            accuracy, confusion = evaluate(state, dataset.test_x,
                                           dataset.test_y)
            evaluations.append(
                {"step": state.step, "target_accuracy": accuracy})
    return state, _run_report(state, dataset, evaluations, confusion)


def _all_parameter_stores(bundle: NetBundle) -> list:
    return [bundle.classifier.params, bundle.disc.params, bundle.gen.params]


def _optimizer_triplet(bundle: NetBundle) -> list:
    return [("cls", bundle.opt_cls), ("disc", bundle.opt_disc),
            ("gen", bundle.opt_gen)]


def save_checkpoint(state: TrainState, path) -> None:
    """Parameters, optimizer moments, step counter, and the full recipe."""
    metadata = {
        "step": state.step,
        "input_dim": state.bundle.classifier.input_dim,
        "hyper": hp_to_dict(state.hp),
        "adam_t": {name: opt.t
                   for name, opt in _optimizer_triplet(state.bundle)},
    }
    tensors = []
    for store in _all_parameter_stores(state.bundle):
        for name, p in store.items():
            tensors.append((name, p.data))
    for opt_name, opt in _optimizer_triplet(state.bundle):
        for name in opt.m:
            tensors.append(("adam.%s.%s.m" % (opt_name, name), opt.m[name]))
            tensors.append(("adam.%s.%s.v" % (opt_name, name), opt.v[name]))
    write_checkpoint(path, metadata, tensors)


def load_checkpoint(path) -> TrainState:
    """Rebuild a TrainState whose next step continues the saved run exactly."""
    metadata, tensors = read_checkpoint(path)
    for key in ("step", "input_dim", "hyper", "adam_t"):
        if key not in metadata:
            raise ContractError("checkpoint metadata lacks %r" % key)
    hp = hp_from_dict(metadata["hyper"])
    bundle = build_bundle(hp, int(metadata["input_dim"]))
    by_name = dict(tensors)
    if len(by_name) != len(tensors):
        raise ContractError("checkpoint holds duplicate tensor names")

    def take(name, like):
        if name not in by_name:
            raise ContractError("checkpoint lacks tensor %r" % name)
        arr = by_name.pop(name)
        if arr.shape != like.shape:
            raise ContractError(
                "checkpoint tensor %r has shape %r, expected %r"
                % (name, arr.shape, like.shape))
        return arr

    for store in _all_parameter_stores(bundle):
        for name, p in store.items():
            p.data = take(name, p.data)
    for opt_name, opt in _optimizer_triplet(bundle):
        opt.t = int(metadata["adam_t"][opt_name])
        for name in opt.m:
            opt.m[name] = take("adam.%s.%s.m" % (opt_name, name), opt.m[name])
            opt.v[name] = take("adam.%s.%s.v" % (opt_name, name), opt.v[name])
    if by_name:
        raise ContractError(
            "checkpoint holds unexpected tensors: %s"
            % ", ".join(sorted(by_name)))
    return TrainState(hp=hp, bundle=bundle, step=int(metadata["step"]))
