"""The four trainable components and their optimizer.

Feature extractor g, classifier h with K+1 outputs (the extra unit receives
generated out-of-class samples), domain discriminator D, and generator G are
all stacks of affine layers with leaky-ReLU hidden activations, differing
only in width and output head.  Includes Adam and the binary checkpoint
codec shared with the trainer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from gada.autodiff import ContractError, DimensionError, ParamStore, Tensor
from gada.rngstreams import site_rng

PROB_EPS = 1e-7  # probability clamp bound; keeps every log in (-inf, 0]

_HEADS = ("linear", "sigmoid", "tanh", "none")


@dataclass
class NetSpec:
    """Widths plus activation choices for one affine stack.

    ``widths`` runs input to output, so a spec has len(widths)-1 layers.
    ``head`` names the output treatment: "linear" leaves raw logits,
    "sigmoid"/"tanh" squash, and "none" applies the hidden activation even
    after the final layer (used for the feature extractor, whose output is
    itself a hidden representation).
    """

    widths: list
    alpha: float = 0.1
    head: str = "linear"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ContractError("a net needs at least one layer (two widths)")
        if any(int(w) <= 0 for w in self.widths):
            raise ContractError("layer widths must be positive, got %s" % (self.widths,))
        if self.head not in _HEADS:
            raise ContractError("unknown head %r (want one of %s)" % (self.head, _HEADS))
        if not 0.0 <= self.alpha < 1.0:
            raise ContractError("alpha must be in [0, 1)")
        self.widths = [int(w) for w in self.widths]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def init_params(spec: NetSpec, seed: int, prefix: str, store: ParamStore) -> None:
    """He-initialized weights (normal, scale sqrt(2/fan_in)), zero biases.

    Each layer draws from its own (seed, site) stream, so inserting a layer
    into one component never reshuffles another component's draws.
    """
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        rng = site_rng(seed, "init.%s.%d" % (prefix, i))
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        store.add("%s.W%d" % (prefix, i), Tensor(W, requires_grad=True))
        store.add("%s.b%d" % (prefix, i), Tensor(np.zeros(fan_out), requires_grad=True))


def _run_stack(spec: NetSpec, params: ParamStore, prefix: str, x: Tensor,
               frozen: bool) -> tuple:
    """Forward through one stack; returns (output, hidden activations).

    ``frozen`` swaps every parameter for a detached view: values identical,
    but reverse mode treats them as constants while gradients still flow
    through to the stack's input.
    """
    if x.data.ndim != 2 or x.data.shape[1] != spec.widths[0]:
        raise DimensionError(
            "input %s does not match stack %s input width %d"
            % (x.shape, prefix, spec.widths[0]))
    hidden = []
    out = x
    for i in range(spec.n_layers):
        W = params["%s.W%d" % (prefix, i)]
        b = params["%s.b%d" % (prefix, i)]
        if frozen:
            W, b = W.detach(), b.detach()
        out = out.affine(W, b)
        last = i == spec.n_layers - 1
        if not last or spec.head == "none":
            out = out.leaky_relu(spec.alpha)
            hidden.append(out)
        elif spec.head == "sigmoid":
            out = out.sigmoid()
        elif spec.head == "tanh":
            out = out.tanh()
    return out, hidden


class ClassifierModel:
    """f = h(g(x)): feature extractor plus (K+1)-way classification head.

    ``phi`` taps the last hidden activation of h for feature matching; h must
    therefore have at least one hidden layer.
    """

    def __init__(self, g_spec: NetSpec, h_spec: NetSpec, K: int, seed: int):
        if K < 2:
            raise ContractError("need at least two real classes")
        if h_spec.widths[-1] != K + 1:
            raise ContractError(
                "classifier head must have K+1=%d outputs, got %d"
                % (K + 1, h_spec.widths[-1]))
        if h_spec.n_layers < 2:
            raise ContractError("h needs a hidden layer to expose the phi tap")
        if g_spec.widths[-1] != h_spec.widths[0]:
            raise DimensionError(
                "g output width %d does not feed h input width %d"
                % (g_spec.widths[-1], h_spec.widths[0]))
        self.g_spec = g_spec
        self.h_spec = h_spec
        self.K = K
        self.params = ParamStore()
        init_params(g_spec, seed, "g", self.params)
        init_params(h_spec, seed, "h", self.params)

    @property
    def input_dim(self) -> int:
        return self.g_spec.widths[0]

    @property
    def phi_dim(self) -> int:
        return self.h_spec.widths[-2]


class DiscriminatorModel:
    """Binary domain discriminator; output read as probability-of-target."""

    def __init__(self, spec: NetSpec, seed: int, tap: str = "features"):
        if spec.widths[-1] != 1 or spec.head != "sigmoid":
            raise ContractError("discriminator must end in a single sigmoid unit")
        if tap not in ("features", "logits"):
            raise ContractError("discriminator tap must be 'features' or 'logits'")
        self.spec = spec
        self.tap = tap
        self.params = ParamStore()
        init_params(spec, seed, "D", self.params)


class GeneratorModel:
    """Noise-to-data generator with tanh-bounded outputs."""

    def __init__(self, spec: NetSpec, seed: int):
        if spec.head != "tanh":
            raise ContractError("generator needs a tanh output head")
        self.spec = spec
        self.params = ParamStore()
        init_params(spec, seed, "G", self.params)

    @property
    def noise_dim(self) -> int:
        return self.spec.widths[0]

    @property
    def out_dim(self) -> int:
        return self.spec.widths[-1]


def forward_classifier(model: ClassifierModel, x: Tensor, frozen: bool = False) -> tuple:
    """Returns (logits[B,K+1], features[B,p], phi[B,q])."""
    features, _ = _run_stack(model.g_spec, model.params, "g", x, frozen)
    logits, hidden = _run_stack(model.h_spec, model.params, "h", features, frozen)
    return logits, features, hidden[-1]


def forward_discriminator(model: DiscriminatorModel, feats: Tensor,
                          frozen: bool = False) -> Tensor:
    """Sigmoid output clamped inside (0,1) so the domain logs stay finite."""
    out, _ = _run_stack(model.spec, model.params, "D", feats, frozen)
    return out.clamp(PROB_EPS, 1.0 - PROB_EPS)


def forward_generator(model: GeneratorModel, z: Tensor, frozen: bool = False) -> Tensor:
    out, _ = _run_stack(model.spec, model.params, "G", z, frozen)
    return out


class AdamState:
    """Adam moments and step counter for one parameter store."""

    def __init__(self, params: ParamStore, lr: float, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ContractError("learning rate must be nonnegative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params: ParamStore, grads: dict, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    for name in params.names():
        if name not in grads:
            raise ContractError("gradient missing for parameter %r" % name)
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name].data
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class CheckpointFormatError(ContractError):
    """Checkpoint bytes do not follow the format; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__("%s (at byte %d)" % (message, offset))
        self.offset = offset


MAGIC = b"GADA-CKPT v1\n"


def write_checkpoint(path, metadata: dict, tensors: list) -> None:
    """Binary checkpoint: magic line, one JSON metadata line, then per tensor
    a name line, a shape line, and the little-endian float64 payload."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for name, arr in tensors:
            arr = np.asarray(arr, dtype=np.float64)
            fh.write(name.encode("utf-8") + b"\n")
            fh.write(" ".join(str(n) for n in arr.shape).encode("utf-8") + b"\n")
            fh.write(arr.astype("<f8").tobytes())


def read_checkpoint(path) -> tuple:
    """Inverse of write_checkpoint; returns (metadata, ordered name->array dict).

    Raises CheckpointFormatError with the offending byte offset on any
    malformation; nothing partial is ever returned.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointFormatError("bad magic, expected %r" % MAGIC.decode().strip(), 0)
    pos = len(MAGIC)

    def take_line(what):
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointFormatError("truncated while reading %s" % what, pos)
        line = blob[pos:end]
        pos = end + 1
        return line

    meta_line = take_line("metadata")
    try:
        metadata = json.loads(meta_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointFormatError("metadata line is not valid JSON", len(MAGIC))
    tensors: dict[str, np.ndarray] = {}
    while pos < len(blob):
        name = take_line("tensor name").decode("utf-8")
        shape_line = take_line("tensor shape").decode("utf-8").strip()
        shape = tuple(int(tok) for tok in shape_line.split()) if shape_line else ()
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if pos + nbytes > len(blob):
            raise CheckpointFormatError(
                "truncated payload for %r: need %d bytes" % (name, nbytes), pos)
        arr = np.frombuffer(blob[pos:pos + nbytes], dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)
        pos += nbytes
    return metadata, tensors
