"""Model variants and the networks each one owns.

Every conditional distribution is a :class:`~adgm.networks.Network` whose
inputs are concatenated in a fixed order: inference nets use ``[a; y; x]``
and generative nets ``[z; y; x]`` (with ``a`` appended last for the SDGM
decoder). The order determines checkpoint layout, so treat it as frozen.
"""

from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .autodiff import Tape, Tensor
from .distributions import GaussianParams
from .networks import HeadSpec, MLPSpec, Network


class Kind(str, Enum):
    VAE = "VAE"
    AVAE = "AVAE"
    ADGM = "ADGM"
    SDGM = "SDGM"
    M2 = "M2"
    ADGM_DET_AUX = "AdgmDetAux"
    ADGM_UNINFORMED_AUX = "AdgmUninformedAux"
    POTENTIAL_FIT = "PotentialFit"


SEMI_SUPERVISED = {Kind.ADGM, Kind.SDGM, Kind.M2, Kind.ADGM_DET_AUX, Kind.ADGM_UNINFORMED_AUX}
UNSUPERVISED = {Kind.VAE, Kind.AVAE}
WITH_AUX = {Kind.AVAE, Kind.ADGM, Kind.SDGM, Kind.ADGM_DET_AUX, Kind.ADGM_UNINFORMED_AUX, Kind.POTENTIAL_FIT}


@dataclass
class ModelVariant:
    kind: Kind
    x_dim: int = 2
    y_dim: int = 0
    a_dim: int = 4
    z_dim: int = 2
    layers: int = 1
    hidden_dims: tuple = (100, 100)
    obs: str = "bernoulli"
    aux_generative_conditions_on_x: bool = False
    batch_norm: bool = False

    def __post_init__(self):
        self.kind = Kind(self.kind)
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.obs not in ("bernoulli", "gaussian"):
            raise ValueError(f"obs must be 'bernoulli' or 'gaussian', got {self.obs!r}")
        if self.kind in SEMI_SUPERVISED and self.y_dim < 2:
            raise ValueError(f"{self.kind.value} needs y_dim >= 2")
        if self.kind not in SEMI_SUPERVISED and self.y_dim:
            raise ValueError(f"{self.kind.value} has no class variable")
        if self.kind in WITH_AUX and self.a_dim < 1:
            raise ValueError(f"{self.kind.value} needs a_dim >= 1")
        if self.kind is Kind.AVAE and self.layers not in (1, 2):
            raise ValueError("AVAE supports 1 or 2 stochastic layers")
        if self.kind is not Kind.AVAE and self.layers != 1:
            raise ValueError("only AVAE has multiple stochastic layers")
        if self.aux_generative_conditions_on_x and self.kind is not Kind.ADGM:
            # SDGM reverses the a<->x arrow, so p(a|.) must not see x
            raise ValueError("aux_generative_conditions_on_x applies to ADGM only")

    @property
    def has_classifier(self) -> bool:
        return self.kind in SEMI_SUPERVISED

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["hidden_dims"] = list(self.hidden_dims)
        return d


def network_table(v: ModelVariant) -> dict[str, tuple[tuple[str, ...], str, str]]:
    """name -> (input symbols in concatenation order, head kind, output symbol)."""
    obs = v.obs
    k = v.kind
    if k is Kind.VAE:
        return {"q_z": (("x",), "gaussian", "z"), "p_x": (("z",), obs, "x")}
    if k is Kind.AVAE and v.layers == 1:
        return {
            "q_a": (("x",), "gaussian", "a"),
            "q_z": (("a", "x"), "gaussian", "z"),
            "p_a": (("z", "x"), "gaussian", "a"),
            "p_x": (("z",), obs, "x"),
        }
    if k is Kind.AVAE:
        return {
            "q_a1": (("x",), "gaussian", "a"),
            "q_z1": (("a1", "x"), "gaussian", "z"),
            "q_a2": (("a1", "x"), "gaussian", "a"),
            "q_z2": (("a2", "z1"), "gaussian", "z"),
            "p_x": (("z1",), obs, "x"),
            "p_z1": (("z2",), "gaussian", "z"),
            "p_a2": (("z2",), "gaussian", "a"),
            "p_a1": (("z1", "z2"), "gaussian", "a"),
        }
    if k is Kind.M2:
        return {
            "q_z": (("y", "x"), "gaussian", "z"),
            "q_y": (("x",), "categorical", "y"),
            "p_x": (("z", "y"), obs, "x"),
        }
    if k is Kind.POTENTIAL_FIT:
        # q(a) is a free Gaussian (q_a/mu, q_a/log_var); no network.
        return {"q_z": (("a",), "gaussian", "z"), "p_a": (("z",), "gaussian", "a")}
    table = {
        "q_a": (("x",), "deterministic" if k is Kind.ADGM_DET_AUX else "gaussian", "a"),
        "q_z": (("a", "y", "x"), "gaussian", "z"),
        "q_y": (("a", "x"), "categorical", "y"),
    }
    if k is Kind.SDGM:
        table["p_a"] = (("z", "y"), "gaussian", "a")
        table["p_x"] = (("z", "y", "a"), obs, "x")
    else:
        if k is Kind.ADGM:
            table["p_a"] = (("z", "y", "x") if v.aux_generative_conditions_on_x else ("z", "y"), "gaussian", "a")
        table["p_x"] = (("z", "y"), obs, "x")
    return table


def _dim(v: ModelVariant, sym: str) -> int:
    base = sym.rstrip("12")
    return {"x": v.x_dim, "y": v.y_dim, "a": v.a_dim, "z": v.z_dim}[base]


@dataclass
class Model:
    """A variant together with its networks, parameters and buffers.

    Parameters whose name starts with ``q_`` belong to the inference model
    (phi); ``p_`` names belong to the generative model (theta). ``p(y)`` is
    fixed uniform and ``p(z)`` is a standard normal.
    """

    variant: ModelVariant
    params: dict[str, np.ndarray] = field(default_factory=dict)
    networks: dict[str, Network] = field(default_factory=dict)
    mode: str = "train"

    @classmethod
    def create(cls, variant: ModelVariant, rng: np.random.Generator) -> "Model":
        model = cls(variant)
        for name, (inputs, head, out) in network_table(variant).items():
            in_dim = sum(_dim(variant, s) for s in inputs)
            bn = variant.batch_norm
            net = Network(name, MLPSpec(in_dim, variant.hidden_dims, bn), HeadSpec(head, _dim(variant, out)))
            model.networks[name] = net
            model.params.update(net.init_params(rng))
        if variant.kind is Kind.POTENTIAL_FIT:
            model.params["q_a/mu"] = np.zeros(variant.a_dim)
            model.params["q_a/log_var"] = np.zeros(variant.a_dim)
        return model

    @property
    def kind(self) -> Kind:
        return self.variant.kind

    @property
    def n_classes(self) -> int:
        return self.variant.y_dim

    def phi_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("q_")]

    def theta_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("p_")]

    def dist(self, tape: Tape, name: str, **inputs: Tensor):
        symbols, _, _ = network_table(self.variant)[name]
        try:
            parts = [inputs[s] for s in symbols]
        except KeyError as e:
            raise ValueError(f"network {name} needs inputs {symbols}") from e
        return self.networks[name](tape, parts, self.mode)

    def q_a_free(self, tape: Tape, n: int) -> GaussianParams:
        """The unconditional q(a) of the potential-fit model, broadcast to n rows."""
        zeros = np.zeros((n, self.variant.a_dim), dtype=tape.dtype)
        return GaussianParams(tape.param("q_a/mu") + zeros, tape.param("q_a/log_var") + zeros)

    def tape(self, dtype=np.float64, requires_grad: bool = True) -> Tape:
        return Tape(self.params, dtype=dtype, requires_grad=requires_grad)

    @contextlib.contextmanager
    def evaluating(self):
        prev, self.mode = self.mode, "eval"
        try:
            yield self
        finally:
            self.mode = prev

    def state_dict(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        for net in self.networks.values():
            out.update(net.buffers())
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        missing = [k for k in self.params if k not in tensors]
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for k in self.params:
            self.params[k] = np.asarray(tensors[k], dtype=np.float64).reshape(self.params[k].shape)
        for net in self.networks.values():
            net.load_buffers(tensors)
