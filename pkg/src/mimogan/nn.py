"""
Real-valued networks on torch autograd (float64, CPU): MLPs, embeddings, Adam,
the input-gradient penalty with double backward, and parameter checkpoints.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import numpy as np
import torch
from eliot import start_action
from pydantic import BaseModel, Field, field_validator
from torch import nn

from mimogan.container import CHECKPOINT_MAGIC, read_container, write_container
from mimogan.errors import ContractViolationError, NumericError, TruncatedFileError, UsageError

DTYPE = torch.float64
INIT_SCHEME = "kaiming-uniform(fan_in, relu), zero bias; embeddings N(0, 1)"
DEFAULT_BETAS = (0.5, 0.9)
DEFAULT_LR = 2e-4
DEFAULT_EPS = 1e-8


def configure_torch(threads: int = 1) -> None:
    """Deterministic single-process torch: fixed thread count, deterministic kernels."""
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)


def as_tensor(value: Any) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value.to(DTYPE)
    return torch.as_tensor(np.asarray(value, dtype=np.float64), dtype=DTYPE)


def check_finite(tensor: torch.Tensor, where: str) -> torch.Tensor:
    if not bool(torch.isfinite(tensor).all()):
        raise NumericError("non-finite values", where=where)
    return tensor


class MlpSpec(BaseModel):
    input_dim: int = Field(gt=0, description="Input features")
    hidden: list[int] = Field(default_factory=lambda: [100, 100], description="Hidden layer widths (ReLU)")
    output_dim: int = Field(gt=0, description="Output features, no final activation")

    @field_validator("hidden")
    @classmethod
    def _check_hidden(cls, value: list[int]) -> list[int]:
        if any(width < 1 for width in value):
            raise ContractViolationError(f"hidden widths must be positive, got {value}")
        return value


class EmbeddingSpec(BaseModel):
    vocab: int = Field(gt=0, description="Number of discrete conditions")
    dim: int = Field(default=4, gt=0, description="Embedding dimension")


class Mlp(nn.Module):
    """Linear layers with ReLU between them and no final activation."""

    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        widths = [spec.input_dim, *spec.hidden, spec.output_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths, widths[1:]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.spec.input_dim:
            raise ContractViolationError(f"MLP expects {self.spec.input_dim} input features, got {x.shape[-1]}")
        last = len(self.layers) - 1
        for index, layer in enumerate(self.layers):
            x = layer(x)
            check_finite(x.detach(), f"layers.{index}")
            if index < last:
                x = torch.relu(x)
        return x


def make_embedding(spec: EmbeddingSpec) -> nn.Embedding:
    return nn.Embedding(spec.vocab, spec.dim, dtype=DTYPE)


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Kaiming-uniform fan-in weights with zero biases; embeddings from N(0, 1)."""
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, nn.Linear):
                nn.init.kaiming_uniform_(sub.weight, mode="fan_in", nonlinearity="relu", generator=generator)
                nn.init.zeros_(sub.bias)
            elif isinstance(sub, nn.Embedding):
                nn.init.normal_(sub.weight, generator=generator)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


@dataclass
class Tape:
    """Recorded forward pass: the differentiable input, the output and the parameters it depends on."""

    inputs: Optional[torch.Tensor] = None
    output: Optional[torch.Tensor] = None
    parameters: dict[str, torch.Tensor] = field(default_factory=dict)
    consumed: bool = False


@dataclass
class Gradients:
    parameters: dict[str, torch.Tensor]
    inputs: Optional[torch.Tensor]


def forward(model: nn.Module, inputs: Any) -> tuple[torch.Tensor, Tape]:
    x = as_tensor(inputs).detach().requires_grad_(True)
    output = model(x)
    check_finite(output.detach(), type(model).__name__)
    return output, Tape(inputs=x, output=output, parameters=dict(model.named_parameters()))


def _grads_or_zeros(grads: Iterable[Optional[torch.Tensor]], like: Iterable[torch.Tensor]) -> list[torch.Tensor]:
    return [torch.zeros_like(t) if g is None else g for g, t in zip(grads, like)]


def backward(tape: Tape, output_adjoint: Any = None) -> Gradients:
    """
    Gradients of <output_adjoint, output> with respect to parameters and inputs.

    Raises:
        UsageError: the tape holds no forward pass or was already consumed
    """
    if tape.output is None or tape.inputs is None:
        raise UsageError("backward called before forward")
    if tape.consumed:
        raise UsageError("tape already consumed by a backward pass")
    adjoint = torch.ones_like(tape.output) if output_adjoint is None else as_tensor(output_adjoint)
    if adjoint.shape != tape.output.shape:
        raise ContractViolationError(f"adjoint shape {tuple(adjoint.shape)} does not match output {tuple(tape.output.shape)}")
    names = list(tape.parameters)
    targets = [tape.inputs, *tape.parameters.values()]
    grads = torch.autograd.grad(tape.output, targets, grad_outputs=adjoint, allow_unused=True)
    grads = _grads_or_zeros(grads, targets)
    tape.consumed = True
    for name, g in zip(["inputs", *names], grads):
        check_finite(g, f"gradient of {name}")
    return Gradients(parameters=dict(zip(names, grads[1:])), inputs=grads[0])


def safe_norm(g: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Euclidean norm whose gradient is 0 at g == 0."""
    squared = (g * g).sum(dim=dim)
    nonzero = squared > 0
    return torch.where(nonzero, torch.sqrt(torch.where(nonzero, squared, torch.ones_like(squared))), torch.zeros_like(squared))


def penalty_from_gradients(gradients: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-row (||g|| - 1)^2 averaged, plus the row norms. Rows are samples."""
    norms = safe_norm(gradients.reshape(gradients.shape[0], -1))
    return ((norms - 1.0) ** 2).mean(), norms


def grad_norm_penalty(model: nn.Module, inputs: Any) -> tuple[float, Gradients]:
    """
    Gradient penalty (||grad_x D(x)|| - 1)^2 averaged over the rows of x, and its parameter gradients.

    The parameter gradients differentiate through the input gradient (double backward).
    """
    x = as_tensor(inputs).detach().requires_grad_(True)
    scores = model(x)
    (g,) = torch.autograd.grad(scores.sum(), x, create_graph=True)
    penalty, _ = penalty_from_gradients(g)
    check_finite(penalty.detach(), "gradient penalty")
    named = dict(model.named_parameters())
    grads = _grads_or_zeros(torch.autograd.grad(penalty, list(named.values()), allow_unused=True), named.values())
    return float(penalty.detach()), Gradients(parameters=dict(zip(named, grads)), inputs=None)


class AdamState:
    """Adam over a named parameter group, with bias correction."""

    def __init__(
        self,
        parameters: dict[str, torch.nn.Parameter],
        lr: float = DEFAULT_LR,
        betas: tuple[float, float] = DEFAULT_BETAS,
        eps: float = DEFAULT_EPS,
    ):
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ContractViolationError(f"Adam betas must lie in [0, 1), got {betas}")
        self.parameters = dict(parameters)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.optimizer = torch.optim.Adam(self.parameters.values(), lr=lr, betas=self.betas, eps=eps)

    @property
    def steps(self) -> int:
        states = [self.optimizer.state[p] for p in self.parameters.values() if p in self.optimizer.state]
        return int(states[0]["step"]) if states else 0

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)

    def step(self) -> None:
        """Update from the .grad fields populated by loss.backward()."""
        self.optimizer.step()


def adam_step(state: AdamState, grads: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Apply one Adam update with explicit gradients; returns the updated parameters."""
    missing = set(state.parameters) - set(grads)
    if missing:
        raise ContractViolationError(f"no gradient for parameters {sorted(missing)}")
    for name, param in state.parameters.items():
        g = as_tensor(grads[name])
        if g.shape != param.shape:
            raise ContractViolationError(f"gradient of {name} has shape {tuple(g.shape)}, parameter {tuple(param.shape)}")
        param.grad = g.clone()
    state.step()
    return state.parameters


def save_checkpoint(path: Union[str, Path], tensors: dict[str, Any], metadata: Optional[dict] = None) -> Path:
    """Named float64 blocks, concatenated little-endian in insertion order."""
    blocks = []
    arrays = []
    offset = 0
    for name, value in tensors.items():
        array = np.ascontiguousarray(
            value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else value, dtype="<f8"
        )
        blocks.append({"name": name, "shape": list(array.shape), "offset": offset, "count": int(array.size)})
        offset += array.size
        arrays.append(array)
    manifest = {"blocks": blocks, "metadata": metadata or {}}
    with start_action(action_type="save_checkpoint", path=str(path), blocks=len(blocks), values=offset):
        return write_container(path, CHECKPOINT_MAGIC, manifest, (a.tobytes() for a in arrays), offset * 8)


def load_checkpoint(path: Union[str, Path]) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest, payload = read_container(path, CHECKPOINT_MAGIC)
    values = np.frombuffer(payload, dtype="<f8")
    tensors = {}
    for block in manifest["blocks"]:
        start, count = block["offset"], block["count"]
        if start + count > values.size:
            raise TruncatedFileError(f"block {block['name']} exceeds the payload", path)
        tensors[block["name"]] = values[start:start + count].reshape(block["shape"]).copy()
    return tensors, manifest.get("metadata", {})


def state_tensors(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {f"{prefix}{name}": tensor for name, tensor in module.state_dict().items()}


def load_state_tensors(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {}
    for name in module.state_dict():
        key = f"{prefix}{name}"
        if key not in tensors:
            raise ContractViolationError(f"checkpoint has no block '{key}'")
        state[name] = torch.as_tensor(tensors[key], dtype=DTYPE)
    module.load_state_dict(state)
