"""Dense feed-forward networks and the multi-network field model.

Weights follow the ``z^l = act(W^l z^{l-1} + b^l)`` orientation: ``W^l`` has
shape ``(width_l, width_{l-1})``. A network with ``layers = L`` applies L
affine maps, so it has ``L - 1`` hidden layers and a linear output map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("tanh", "relu", "linear")
MODES = ("independent", "single")


@dataclass(frozen=True)
class NetworkArch:
    layers: int
    neurons: int
    activation: str = "tanh"
    mode: str = "independent"

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.neurons < 1:
            raise ValueError(f"neurons must be >= 1, got {self.neurons}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def parse(cls, text: str, **kw) -> "NetworkArch":
        """``"5x20"`` -> 5 layers of 20 neurons."""
        try:
            layers, neurons = (int(p) for p in text.lower().split("x"))
        except ValueError:
            raise ValueError(f"architecture must look like LAYERSxNEURONS, got {text!r}") from None
        return cls(layers, neurons, **kw)

    def widths(self, d_x: int, d_y: int) -> list[int]:
        return [d_x] + [self.neurons] * (self.layers - 1) + [d_y]

    def to_dict(self) -> dict:
        return {"layers": self.layers, "neurons": self.neurons,
                "activation": self.activation, "mode": self.mode}


# Networks i-iv of the reference study (layers, neurons).
TABLE1 = {
    "i": NetworkArch(5, 20),
    "ii": NetworkArch(5, 50),
    "iii": NetworkArch(10, 20),
    "iv": NetworkArch(10, 50),
}


def parameter_count(layers: int, neurons: int, d_x: int, d_y: int) -> int:
    if layers == 1:
        return d_x * d_y + d_y
    n = neurons
    return (d_x * n + n) + (layers - 2) * (n * n + n) + (n * d_y + d_y)


@dataclass
class DenseNetwork:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {l}: W {W.shape} incompatible with b {b.shape}")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: expects width {W.shape[1]}, "
                                 f"previous layer gives {self.weights[l - 1].shape[0]}")
        if self.activations[-1] != "linear":
            raise ValueError("output layer must be linear")

    @property
    def d_x(self) -> int:
        return self.weights[0].shape[1]

    @property
    def d_y(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{l}"] = W
            out[f"{prefix}b{l}"] = b
        return out

    def forward(self, tape: ad.Tape, x: ad.Node, prefix: str = "") -> ad.Node:
        """Build the network on ``tape`` for a batch input node of shape (N, d_x).

        Parameters become tape variables named ``{prefix}W{l}``/``{prefix}b{l}``.
        Returns an (N, d_y) node.
        """
        if x.value is not None and (np.ndim(x.value) != 2 or np.shape(x.value)[1] != self.d_x):
            raise ValueError(f"input must have shape (N, {self.d_x}), got {np.shape(x.value)}")
        z = x
        for l, (W, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            Wn = tape.variable(f"{prefix}W{l}", W)
            bn = tape.variable(f"{prefix}b{l}", b)
            z = ad.add(ad.matmul(z, ad.transpose(Wn)), bn)
            if act == "tanh":
                z = ad.tanh(z)
            elif act == "relu":
                z = ad.relu(z)
        return z

    def __call__(self, x) -> np.ndarray:
        """Plain numpy evaluation; ``x`` is (N, d_x) or a single point."""
        z = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if z.shape[1] != self.d_x:
            raise ValueError(f"input must have {self.d_x} columns, got {z.shape[1]}")
        for W, b, act in zip(self.weights, self.biases, self.activations):
            z = z @ W.T + b
            if act == "tanh":
                z = np.tanh(z)
            elif act == "relu":
                z = np.maximum(z, 0.0)
        return z

    def copy(self) -> "DenseNetwork":
        return DenseNetwork([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                            list(self.activations))


def init_network(arch: NetworkArch, d_x: int, d_y: int, seed: int) -> DenseNetwork:
    """Glorot-uniform weights, zero biases."""
    if d_x < 1 or d_y < 1:
        raise ValueError("input and output widths must be >= 1")
    rng = np.random.default_rng(seed)
    widths = arch.widths(d_x, d_y)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    acts = [arch.activation] * (arch.layers - 1) + ["linear"]
    return DenseNetwork(weights, biases, acts)


@dataclass
class FieldEval:
    """Graph nodes for one field at a batch: value and spatial derivatives."""

    value: ad.Node
    dx: ad.Node
    dy: ad.Node


@dataclass
class FieldModel:
    """Named fields backed by independent networks or one shared network."""

    fields: tuple[str, ...]
    inputs: tuple[str, ...]
    arch: NetworkArch
    networks: dict[str, DenseNetwork] = field(default_factory=dict)

    SHARED = "shared"

    @property
    def d_x(self) -> int:
        return len(self.inputs)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for name, net in self.networks.items():
            out.update(net.parameters(f"{name}/"))
        return out

    @property
    def n_params(self) -> int:
        return sum(net.n_params for net in self.networks.values())

    @property
    def stacked(self) -> bool:
        """Independent networks of identical shape are evaluated as one batched network."""
        if self.arch.mode != "independent" or len(self.fields) < 2:
            return False
        nets = [self.networks[f] for f in self.fields]
        ref = nets[0]
        return all([W.shape for W in n.weights] == [W.shape for W in ref.weights]
                   and n.activations == ref.activations for n in nets)

    def graph_parameters(self) -> dict[str, np.ndarray]:
        """Arrays bound to the tape variables created by ``field_nodes``.

        Stacked models use ``stack/W{l}`` of shape (fields, out, in) and
        ``stack/b{l}`` of shape (fields, 1, out); otherwise this equals
        ``parameters()``.
        """
        if not self.stacked:
            return self.parameters()
        nets = [self.networks[f] for f in self.fields]
        out = {}
        for l in range(len(nets[0].weights)):
            out[f"stack/W{l}"] = np.stack([n.weights[l] for n in nets])
            out[f"stack/b{l}"] = np.stack([n.biases[l] for n in nets])[:, None, :]
        return out

    def load_graph_parameters(self, values: dict) -> None:
        """Write arrays keyed as in ``graph_parameters`` back into the networks."""
        if not self.stacked:
            for name, net in self.networks.items():
                for l in range(len(net.weights)):
                    net.weights[l] = np.array(values[f"{name}/W{l}"], dtype=np.float64)
                    net.biases[l] = np.array(values[f"{name}/b{l}"], dtype=np.float64)
            return
        for k, name in enumerate(self.fields):
            net = self.networks[name]
            for l in range(len(net.weights)):
                net.weights[l] = np.array(values[f"stack/W{l}"][k], dtype=np.float64)
                net.biases[l] = np.array(values[f"stack/b{l}"][k, 0], dtype=np.float64)

    def field_nodes(self, tape: ad.Tape, x: ad.Node) -> dict[str, FieldEval]:
        """Outputs and their x/y derivatives (inputs 0 and 1) as graph nodes."""
        if x.op != "variable":
            raise ValueError("field_nodes needs the input variable node")
        out = {}
        if self.stacked:
            xs = ad.tile(x, len(self.fields))
            z = xs
            acts = self.networks[self.fields[0]].activations
            params = self.graph_parameters()
            for l, act in enumerate(acts):
                Wn = tape.variable(f"stack/W{l}", params[f"stack/W{l}"])
                bn = tape.variable(f"stack/b{l}", params[f"stack/b{l}"])
                z = ad.add(ad.matmul(z, ad.transpose(Wn)), bn)
                if act == "tanh":
                    z = ad.tanh(z)
                elif act == "relu":
                    z = ad.relu(z)
            grad = ad.partial_derivative(tape, z, xs)
            for k, name in enumerate(self.fields):
                g = ad.select(grad, k)
                out[name] = FieldEval(ad.column(ad.select(z, k), 0), ad.column(g, 0), ad.column(g, 1))
        elif self.arch.mode == "independent":
            for name in self.fields:
                y = self.networks[name].forward(tape, x, f"{name}/")
                out[name] = _field_eval(tape, ad.column(y, 0), x)
        else:
            y = self.networks[self.SHARED].forward(tape, x, f"{self.SHARED}/")
            for k, name in enumerate(self.fields):
                out[name] = _field_eval(tape, ad.column(y, k), x)
        return out

    def predict(self, points) -> dict[str, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.arch.mode == "independent":
            return {name: self.networks[name](pts)[:, 0] for name in self.fields}
        y = self.networks[self.SHARED](pts)
        return {name: y[:, k] for k, name in enumerate(self.fields)}

    def copy(self) -> "FieldModel":
        return FieldModel(self.fields, self.inputs, self.arch,
                          {k: v.copy() for k, v in self.networks.items()})


def _field_eval(tape, value, x) -> FieldEval:
    grad = ad.input_derivative(tape, value, x)
    return FieldEval(value, ad.column(grad, 0), ad.column(grad, 1))


def build_field_model(fields, arch: NetworkArch, inputs=("x", "y"), seed: int = 0) -> FieldModel:
    fields = tuple(fields)
    if not fields:
        raise ValueError("need at least one field")
    if len(set(fields)) != len(fields):
        raise ValueError(f"duplicate field names in {fields}")
    inputs = tuple(inputs)
    if arch.mode == "independent":
        nets = {name: init_network(arch, len(inputs), 1, seed + i) for i, name in enumerate(fields)}
    else:
        nets = {FieldModel.SHARED: init_network(arch, len(inputs), len(fields), seed)}
    return FieldModel(fields, inputs, arch, nets)
