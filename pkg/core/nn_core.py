"""
Neural Network Core Module
Differentiable building blocks shared by every network in the package, a
parameter store with per-tensor freezing, Adam stepping and a central
finite-difference gradient oracle.

Backward passes come from torch autograd; the *_backward helpers expose them
with an explicit (inputs -> gradients) contract for testing.
"""

import math
import re
from dataclasses import dataclass
from typing import Callable, ClassVar, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from core.exceptions import DomainError, NumericError, ShapeError
from utils.logger import get_logger

logger = get_logger(__name__)

PRELU_INIT = 0.25
BATCHNORM_MOMENTUM = 0.1
BATCHNORM_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    """
    Convolution layer description using the ConvK-N-S-P naming convention

    "Conv3-64-1-1" is a 3x3 kernel, 64 filters, stride 1, padding 1.
    """
    kind: str
    kernel: int
    stride: int
    padding: int
    channels_in: int
    channels_out: int

    _PATTERN: ClassVar[re.Pattern] = re.compile(r'^Conv(\d+)-(\d+)-(\d+)-(\d+)$')

    @classmethod
    def parse(cls, name: str, channels_in: int) -> 'LayerSpec':
        match = cls._PATTERN.match(name)
        if not match:
            raise DomainError(f"Layer name must look like Conv3-64-1-1, got {name!r}")
        kernel, filters, stride, padding = (int(g) for g in match.groups())
        return cls('conv', kernel, stride, padding, channels_in, filters)

    def build(self, bias: bool = True) -> nn.Conv2d:
        return nn.Conv2d(self.channels_in, self.channels_out, self.kernel,
                         stride=self.stride, padding=self.padding, bias=bias)

    def __str__(self) -> str:
        return f"Conv{self.kernel}-{self.channels_out}-{self.stride}-{self.padding}"


def conv_layer(name: str, channels_in: int) -> nn.Conv2d:
    """Build an nn.Conv2d from a ConvK-N-S-P name"""
    return LayerSpec.parse(name, channels_in).build()


def _batched(x: Tensor, expected_dims: int = 4) -> Tuple[Tensor, bool]:
    if x.dim() == expected_dims - 1:
        return x.unsqueeze(0), True
    if x.dim() != expected_dims:
        raise ShapeError(f"Expected a {expected_dims - 1}-D or {expected_dims}-D tensor, got shape {tuple(x.shape)}")
    return x, False


def conv2d_forward(x: Tensor, spec: LayerSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation with bias on a CHW or NCHW tensor"""
    batch, single = _batched(x)
    if batch.shape[1] != spec.channels_in:
        raise ShapeError(f"{spec} expects {spec.channels_in} input channels, got {batch.shape[1]}")
    expected = (spec.channels_out, spec.channels_in, spec.kernel, spec.kernel)
    if tuple(weight.shape) != expected:
        raise ShapeError(f"{spec} expects weight shape {expected}, got {tuple(weight.shape)}")
    out = F.conv2d(batch, weight, bias, stride=spec.stride, padding=spec.padding)
    return out.squeeze(0) if single else out


def conv2d_backward(x: Tensor, spec: LayerSpec, weight: Tensor, bias: Optional[Tensor],
                    grad_output: Tensor) -> Tuple[Tensor, Tensor, Optional[Tensor]]:
    """Gradients of conv2d_forward with respect to (input, weight, bias)"""
    leaves = [t.detach().requires_grad_(True) for t in (x, weight)]
    bias_leaf = bias.detach().requires_grad_(True) if bias is not None else None
    out = conv2d_forward(leaves[0], spec, leaves[1], bias_leaf)
    targets = leaves + ([bias_leaf] if bias_leaf is not None else [])
    grads = torch.autograd.grad(out, targets, grad_outputs=grad_output)
    grad_bias = grads[2] if bias_leaf is not None else None
    return grads[0], grads[1], grad_bias


class ResidualBlock(nn.Module):
    """resblock-C: two Conv3-C-1-1 with a PReLU between, plus identity skip"""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = conv_layer(f"Conv3-{channels}-1-1", channels)
        self.act = nn.PReLU(init=PRELU_INIT)
        self.conv2 = conv_layer(f"Conv3-{channels}-1-1", channels)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(self.act(self.conv1(x)))


def residual_block(x: Tensor, block: ResidualBlock) -> Tensor:
    """Apply a residual block to a CHW or NCHW tensor"""
    batch, single = _batched(x)
    if batch.shape[1] != block.channels:
        raise ShapeError(f"Residual block width {block.channels} does not match {batch.shape[1]} channels")
    out = block(batch)
    return out.squeeze(0) if single else out


class BiLSTM(nn.Module):
    """Single-layer bidirectional LSTM whose output width is hidden_dim (half per direction)"""

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        if hidden_dim % 2:
            raise DomainError(f"Bidirectional hidden size must be even, got {hidden_dim}")
        self.hidden_dim = hidden_dim
        self.lstm = nn.LSTM(input_size=input_dim, hidden_size=hidden_dim // 2,
                            num_layers=1, batch_first=True, bidirectional=True)

    def forward(self, embeddings: Tensor, lengths: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        """
        Args:
            embeddings: (batch, T, input_dim)
            lengths: optional (batch,) true lengths for padded batches

        Returns:
            (hidden_states (batch, T, hidden_dim), final (batch, hidden_dim))
        """
        if lengths is None:
            hidden, (h_n, _) = self.lstm(embeddings)
        else:
            packed = nn.utils.rnn.pack_padded_sequence(
                embeddings, lengths.cpu(), batch_first=True, enforce_sorted=False)
            packed_out, (h_n, _) = self.lstm(packed)
            hidden, _ = nn.utils.rnn.pad_packed_sequence(
                packed_out, batch_first=True, total_length=embeddings.shape[1])
        final = torch.cat([h_n[0], h_n[1]], dim=-1)
        return hidden, final


def bilstm_forward(embeddings: Tensor, lstm: BiLSTM) -> Tuple[Tensor, Tensor]:
    """
    Run a single sequence through a bidirectional LSTM

    Args:
        embeddings: (T, input_dim) sequence
        lstm: BiLSTM module

    Returns:
        (hidden_states (T, D), final (D,)) where each row concatenates the
        forward and backward D/2 hidden vectors
    """
    if embeddings.dim() != 2:
        raise ShapeError(f"Expected (T, input_dim) embeddings, got {tuple(embeddings.shape)}")
    if embeddings.shape[0] < 1:
        raise DomainError("Cannot run an LSTM over an empty sequence")
    hidden, final = lstm(embeddings.unsqueeze(0))
    return hidden.squeeze(0), final.squeeze(0)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return F.softmax(x, dim=dim)


def gap(x: Tensor) -> Tensor:
    """Global average pooling: (..., C, H, W) -> (..., C)"""
    if x.dim() < 3:
        raise ShapeError(f"Global average pooling needs (C, H, W), got {tuple(x.shape)}")
    return x.mean(dim=(-2, -1))


def prelu(x: Tensor, weight: Tensor) -> Tensor:
    return F.prelu(x, weight)


def fc(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"Fully-connected layer expects {weight.shape[1]} features, got {x.shape[-1]}")
    return F.linear(x, weight, bias)


def batchnorm(x: Tensor, running_mean: Tensor, running_var: Tensor, weight: Optional[Tensor] = None,
              bias: Optional[Tensor] = None, training: bool = False,
              momentum: float = BATCHNORM_MOMENTUM, eps: float = BATCHNORM_EPS) -> Tensor:
    """Batch normalization over NCHW; in training mode running statistics are updated in place"""
    batch, single = _batched(x)
    if batch.shape[1] != running_mean.shape[0]:
        raise ShapeError(f"BatchNorm has {running_mean.shape[0]} channels, input has {batch.shape[1]}")
    out = F.batch_norm(batch, running_mean, running_var, weight, bias, training, momentum, eps)
    return out.squeeze(0) if single else out


def upsample_nearest2x(x: Tensor) -> Tensor:
    batch, single = _batched(x)
    out = F.interpolate(batch, scale_factor=2, mode='nearest')
    return out.squeeze(0) if single else out


def init_weights(module: nn.Module, seed: int) -> nn.Module:
    """
    Seeded Kaiming-normal (fan-in, PReLU gain) init for conv/linear weights,
    zero biases, PReLU slopes at 0.25. LSTM and embedding weights use a
    seeded normal scaled by 1/sqrt(fan_in).
    """
    generator = torch.Generator().manual_seed(seed)
    gain = nn.init.calculate_gain('leaky_relu', PRELU_INIT)
    with torch.no_grad():
        for sub in module.modules():
            if isinstance(sub, (nn.Conv1d, nn.Conv2d, nn.Linear)):
                fan_in = sub.weight[0].numel()
                std = gain / math.sqrt(fan_in)
                sub.weight.copy_(torch.randn(sub.weight.shape, generator=generator, dtype=sub.weight.dtype) * std)
                if sub.bias is not None:
                    sub.bias.zero_()
            elif isinstance(sub, nn.PReLU):
                sub.weight.fill_(PRELU_INIT)
            elif isinstance(sub, nn.LSTM):
                for name, param in sub.named_parameters():
                    if name.startswith('weight'):
                        std = 1.0 / math.sqrt(param.shape[1])
                        param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * std)
                    else:
                        param.zero_()
            elif isinstance(sub, nn.Embedding):
                sub.weight.copy_(torch.randn(sub.weight.shape, generator=generator, dtype=sub.weight.dtype))
    return module


class ParamStore:
    """
    Named view over the parameters of several modules

    Names are "<prefix>.<parameter path>", e.g. "generator.head.weight".
    Frozen entries have requires_grad disabled and are skipped by the optimizer.
    """

    def __init__(self, modules: Optional[Mapping[str, nn.Module]] = None):
        self._modules: Dict[str, nn.Module] = {}
        self._params: Dict[str, nn.Parameter] = {}
        self._frozen: Dict[str, bool] = {}
        for prefix, module in (modules or {}).items():
            self.add_module(prefix, module)

    def add_module(self, prefix: str, module: nn.Module, frozen: bool = False) -> None:
        self._modules[prefix] = module
        for name, param in module.named_parameters():
            full_name = f"{prefix}.{name}"
            self._params[full_name] = param
            self._frozen[full_name] = False
        if frozen:
            self.freeze(prefix)

    @property
    def modules(self) -> Dict[str, nn.Module]:
        return dict(self._modules)

    def _matching(self, prefix: Optional[str]) -> List[str]:
        if prefix is None:
            return list(self._params)
        return [n for n in self._params if n == prefix or n.startswith(prefix + '.')]

    def freeze(self, prefix: Optional[str] = None) -> None:
        for name in self._matching(prefix):
            self._frozen[name] = True
            self._params[name].requires_grad_(False)
            self._params[name].grad = None

    def unfreeze(self, prefix: Optional[str] = None) -> None:
        for name in self._matching(prefix):
            self._frozen[name] = False
            self._params[name].requires_grad_(True)

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def frozen_flags(self) -> Dict[str, bool]:
        return dict(self._frozen)

    def __getitem__(self, name: str) -> nn.Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self) -> Iterable[Tuple[str, nn.Parameter]]:
        return self._params.items()

    def trainable(self, prefix: Optional[str] = None) -> List[Tuple[str, nn.Parameter]]:
        return [(n, self._params[n]) for n in self._matching(prefix) if not self._frozen[n]]

    def gradient(self, name: str) -> Tensor:
        param = self._params[name]
        return param.grad if param.grad is not None else torch.zeros_like(param)

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad = None

    def count(self, trainable_only: bool = False) -> int:
        names = [n for n in self._params if not (trainable_only and self._frozen[n])]
        return sum(self._params[n].numel() for n in names)

    def snapshot(self, prefix: Optional[str] = None) -> Dict[str, Tensor]:
        return {n: self._params[n].detach().clone() for n in self._matching(prefix)}

    def state_tensors(self) -> Dict[str, Tensor]:
        """Parameters and buffers (e.g. batchnorm running stats) of every module, prefixed"""
        state = {}
        for prefix, module in self._modules.items():
            for name, tensor in module.state_dict().items():
                state[f"{prefix}.{name}"] = tensor
        return state

    def load_state_tensors(self, state: Mapping[str, Tensor], strict: bool = True) -> None:
        for prefix, module in self._modules.items():
            own = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + '.')}
            if not own and not strict:
                continue
            module.load_state_dict(own, strict=strict)


class AdamOptimizer:
    """
    torch.optim.Adam over the trainable entries of a ParamStore

    Frozen entries never move even if a gradient was written into them, and a
    non-finite gradient aborts the step naming the offending parameter.
    """

    def __init__(self, store: ParamStore, lr: float, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, prefix: Optional[str] = None):
        self.store = store
        self.prefix = prefix
        self._names = [name for name, _ in store.trainable(prefix)]
        params = [store[name] for name in self._names]
        if not params:
            raise DomainError(f"No trainable parameters under prefix {prefix!r}")
        self.optimizer = torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]['lr']

    def set_lr(self, lr: float) -> None:
        for group in self.optimizer.param_groups:
            group['lr'] = lr

    def zero_grad(self) -> None:
        self.optimizer.zero_grad(set_to_none=True)

    def step(self) -> None:
        for name in self._names:
            param = self.store[name]
            if self.store.is_frozen(name):
                param.grad = None
                continue
            if param.grad is not None and not torch.isfinite(param.grad).all():
                raise NumericError("Non-finite gradient", parameter=name)
        self.optimizer.step()

    def state_dict(self) -> dict:
        return self.optimizer.state_dict()

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state)


def adam_step(store: ParamStore, optimizer: AdamOptimizer) -> ParamStore:
    """Apply one Adam update using the gradients currently held by the store"""
    if optimizer.store is not store:
        raise DomainError("Optimizer was built for a different parameter store")
    optimizer.step()
    return store


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _scalar(output) -> Tensor:
    if isinstance(output, (tuple, list)):
        return sum(_scalar(o) for o in output if isinstance(o, Tensor))
    return output.sum()


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], tolerance: float = 1e-4,
               h: float = 1e-4, max_checks: Optional[int] = None, seed: int = 0,
               floor: float = 1e-12) -> GradCheckReport:
    """
    Compare autograd against central finite differences

    The function's outputs are summed to a scalar. Relative error per element
    is |analytic - numeric| / max(|analytic|, |numeric|, floor).

    Args:
        fn: Callable taking the inputs positionally
        inputs: Tensors to differentiate with respect to (use float64)
        tolerance: Threshold reported through GradCheckReport.passed
        h: Finite-difference step
        max_checks: If set, a seeded random subset of this many elements per input
        seed: Seed for the subset selection
        floor: Lower bound on the error denominator; only guards 0/0

    Returns:
        GradCheckReport with the maximum relative error
    """
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    total = _scalar(fn(*leaves))
    if not torch.isfinite(total):
        raise NumericError("Gradient check function produced a non-finite output", component='grad_check')
    analytic = torch.autograd.grad(total, leaves, allow_unused=True)

    generator = torch.Generator().manual_seed(seed)
    max_error, checked = 0.0, 0
    with torch.no_grad():
        for leaf, grad in zip(leaves, analytic):
            grad = torch.zeros_like(leaf) if grad is None else grad
            flat = leaf.detach().view(-1)
            flat_grad = grad.reshape(-1)
            n = flat.numel()
            if max_checks is not None and max_checks < n:
                indices = torch.randperm(n, generator=generator)[:max_checks].tolist()
            else:
                indices = range(n)
            for i in indices:
                original = flat[i].item()
                flat[i] = original + h
                plus = _scalar(fn(*leaves)).item()
                flat[i] = original - h
                minus = _scalar(fn(*leaves)).item()
                flat[i] = original
                if not (math.isfinite(plus) and math.isfinite(minus)):
                    raise NumericError("Non-finite value during finite differencing", component='grad_check')
                numeric = (plus - minus) / (2 * h)
                a = flat_grad[i].item()
                error = 0.0 if a == numeric else abs(a - numeric) / max(abs(a), abs(numeric), floor)
                max_error = max(max_error, error)
                checked += 1

    logger.debug(f"Gradient check over {checked} elements: max relative error {max_error:.3e}")
    return GradCheckReport(max_rel_error=max_error, checked=checked, tolerance=tolerance)
