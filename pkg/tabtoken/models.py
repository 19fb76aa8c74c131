"""
Top-layer models
MLP, ResNet, Transformer and linear heads over feature tokens
"""

import logging
import math
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .errors import ContractViolation, DataError, InvalidArgument
from .numerics import (
    Tensor,
    batch_norm,
    dropout_mask,
    layer_norm,
    matmul,
    reglu,
    relu,
    softmax,
    sorted_mean,
)
from .objective import CombineMode, combine
from .schemas import MlpConfig, ModelKind, ResNetConfig, TransformerConfig
from .tokenizer import kaiming_uniform

logger = logging.getLogger(__name__)


class Module:
    """Parameter container with train/eval modes and a shared dropout generator"""

    training: bool = True
    generator: Optional[np.random.Generator] = None

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Tensor]]:
        found = []
        for name, value in self._children():
            if isinstance(value, Tensor):
                found.append((prefix + name, value))
            else:
                found.extend(value.named_parameters(f"{prefix}{name}."))
        return found

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        found = [(prefix + name, value) for name, value in getattr(self, "buffers", {}).items()]
        for name, value in self._children():
            if isinstance(value, Module):
                found.extend(value.named_buffers(f"{prefix}{name}."))
        return found

    def modules(self) -> List["Module"]:
        found = [self]
        for _, value in self._children():
            if isinstance(value, Module):
                found.extend(value.modules())
        return found

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy matching arrays in; returns the names that were skipped"""
        skipped = []
        targets = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, target in list(targets.items()) + list(buffers.items()):
            current = target.data if isinstance(target, Tensor) else target
            value = state.get(name)
            if value is None or np.shape(value) != current.shape:
                if strict:
                    raise DataError(f"state entry {name} is missing or has the wrong shape")
                skipped.append(name)
                continue
            current[...] = value
        return skipped

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_generator(self, generator: np.random.Generator) -> None:
        for module in self.modules():
            module.generator = generator


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(kaiming_uniform(rng, (in_features, out_features), fan_in=in_features),
                             requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name="bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DataError(f"Linear expects last dimension {self.in_features}, got {x.shape}")
        if x.ndim == 1:
            return (x.reshape(1, -1) @ self.weight + self.bias).reshape(self.out_features)
        return x @ self.weight + self.bias


class Dropout(Module):
    def __init__(self, rate: float):
        if not 0.0 <= rate < 1.0:
            raise InvalidArgument(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        return x * dropout_mask(x.shape, self.rate, self.generator)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = Tensor(np.ones(dim), requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(dim), requires_grad=True, name="bias")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm(Module):
    """Batch statistics in training, running estimates (momentum 0.1) in evaluation"""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.weight = Tensor(np.ones(dim), requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(dim), requires_grad=True, name="bias")
        self.buffers = {"running_mean": np.zeros(dim), "running_var": np.ones(dim)}

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training:
            mean = self.buffers["running_mean"]
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            return (x - mean) * inv_std * self.weight + self.bias
        n = x.shape[0]
        if n < 2:
            raise InvalidArgument("BatchNorm needs at least two rows in training mode")
        out, mean, variance = batch_norm(x, self.weight, self.bias, self.eps)
        m = self.momentum
        self.buffers["running_mean"][...] = (1 - m) * self.buffers["running_mean"] + m * mean
        self.buffers["running_var"][...] = (1 - m) * self.buffers["running_var"] + m * variance * n / (n - 1)
        return out


class MLP(Module):
    """Linear(block(...block(x))) with block = Dropout(ReLU(Linear(x)))"""

    def __init__(self, d_in: int, n_out: int, config: MlpConfig, rng: np.random.Generator):
        width = config.hidden_size
        self.blocks = [Linear(d_in if i == 0 else width, width, rng) for i in range(config.layer_count)]
        self.dropout = Dropout(config.dropout)
        self.head = Linear(width, n_out, rng)

    def block(self, i: int, x: Tensor) -> Tensor:
        return self.dropout(relu(self.blocks[i](x)))

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(len(self.blocks)):
            x = self.block(i, x)
        return self.head(x)


class ResidualBlock(Module):
    def __init__(self, size: int, hidden: int, config: ResNetConfig, rng: np.random.Generator):
        self.norm = BatchNorm(size)
        self.linear_first = Linear(size, hidden, rng)
        self.linear_second = Linear(hidden, size, rng)
        self.hidden_dropout = Dropout(config.hidden_dropout)
        self.residual_dropout = Dropout(config.residual_dropout)

    def __call__(self, x: Tensor) -> Tensor:
        z = self.hidden_dropout(relu(self.linear_first(self.norm(x))))
        return x + self.residual_dropout(self.linear_second(z))


class ResNet(Module):
    def __init__(self, d_in: int, n_out: int, config: ResNetConfig, rng: np.random.Generator):
        size = config.layer_size
        hidden = int(size * config.hidden_factor)
        self.stem = Linear(d_in, size, rng)
        self.blocks = [ResidualBlock(size, hidden, config, rng) for _ in range(config.layer_count)]
        self.head_norm = BatchNorm(size)
        self.head = Linear(size, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return self.head(relu(self.head_norm(x)))


class LinearModel(Module):
    def __init__(self, d_in: int, n_out: int, rng: np.random.Generator):
        self.head = Linear(d_in, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.head(x)


class MultiheadAttention(Module):
    """Scaled dot-product attention per head, heads concatenated and projected"""

    def __init__(self, k: int, head_count: int, attention_dropout: float, rng: np.random.Generator):
        if k % head_count:
            raise InvalidArgument(f"token size {k} is not divisible by {head_count} heads")
        self.k = k
        self.head_count = head_count
        self.query = Linear(k, k, rng)
        self.key = Linear(k, k, rng)
        self.value = Linear(k, k, rng)
        self.output = Linear(k, k, rng)
        self.dropout = Dropout(attention_dropout)
        self.last_attention: Optional[np.ndarray] = None

    def _split_heads(self, x: Tensor) -> Tensor:
        n, d, _ = x.shape
        return x.reshape(n, d, self.head_count, self.k // self.head_count).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.k:
            raise ContractViolation(f"attention expects (N, d, {self.k}) tokens, got {x.shape}")
        n, d, _ = x.shape
        q = self._split_heads(self.query(x))
        key = self._split_heads(self.key(x))
        v = self._split_heads(self.value(x))
        scores = (q @ key.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.k // self.head_count))
        weights = softmax(scores, axis=-1)
        self.last_attention = weights.data
        mixed = self.dropout(weights) @ v
        return self.output(mixed.transpose(0, 2, 1, 3).reshape(n, d, self.k))


class FeedForward(Module):
    def __init__(self, k: int, config: TransformerConfig, rng: np.random.Generator):
        hidden = int(k * config.ffn_factor)
        self.linear_first = Linear(k, 2 * hidden, rng)
        self.dropout = Dropout(config.ffn_dropout)
        self.linear_second = Linear(hidden, k, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.linear_second(self.dropout(reglu(self.linear_first(x))))


class TransformerLayer(Module):
    """LayerNorm(Residual(FFN, Residual(MultiheadAttention, X)))"""

    def __init__(self, k: int, config: TransformerConfig, rng: np.random.Generator):
        self.attention = MultiheadAttention(k, config.head_count, config.attention_dropout, rng)
        self.ffn = FeedForward(k, config, rng)
        self.residual_dropout = Dropout(config.residual_dropout)
        self.norm = LayerNorm(k)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.residual_dropout(self.attention(x))
        x = x + self.residual_dropout(self.ffn(x))
        return self.norm(x)


class Transformer(Module):
    """Transformer layers over the token set; prediction = Linear(ReLU(mean of output tokens))"""

    def __init__(self, k: int, n_out: int, config: TransformerConfig, rng: np.random.Generator):
        self.layers = [TransformerLayer(k, config, rng) for _ in range(config.layer_count)]
        self.head = Linear(k, n_out, rng)

    def forward_with_tokens(self, tokens: Tensor) -> Tuple[Tensor, Tensor]:
        squeeze = tokens.ndim == 2
        x = tokens.reshape(1, *tokens.shape) if squeeze else tokens
        for layer in self.layers:
            x = layer(x)
        prediction = self.head(relu(sorted_mean(x, axis=-2)))
        if squeeze:
            return x.reshape(x.shape[1:]), prediction.reshape(prediction.shape[1:])
        return x, prediction

    def __call__(self, tokens: Tensor) -> Tensor:
        return self.forward_with_tokens(tokens)[1]


class TabularModel(Module):
    """Top-layer network g applied to tokenizer output (N, d, k)"""

    def __init__(self, kind: ModelKind, network: Module, combine_mode: CombineMode,
                 config: Optional[dict], k: int, d: int, n_outputs: int):
        self.kind = ModelKind(kind)
        self.network = network
        self.combine_mode = CombineMode(combine_mode)
        self.config = config or {}
        self.k = k
        self.d = d
        self.n_outputs = n_outputs

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.ndim != 3 or tokens.shape[-1] != self.k:
            raise ContractViolation(f"expected (N, d, {self.k}) tokens, got {tokens.shape}")
        if self.kind is ModelKind.TRANSFORMER:
            return self.network(tokens)
        return self.network(combine(tokens, self.combine_mode))

    def head_parameters(self) -> List[Tensor]:
        return self.network.head.parameters()


def build_model(kind: Union[ModelKind, str], config, k: int, d: int, n_outputs: int,
                combine_mode: Union[CombineMode, str] = CombineMode.AVERAGE, seed=None) -> TabularModel:
    """
    Fresh top-layer model with Kaiming-uniform weights and zero biases.

    `config` is the architecture section (MlpConfig, ResNetConfig, TransformerConfig)
    or None for the linear head. The input width is k for averaged tokens and d * k
    for concatenated tokens; the transformer always sees the token set.
    """
    kind = ModelKind(kind)
    combine_mode = CombineMode(combine_mode)
    rng = np.random.default_rng(seed)
    d_in = k if combine_mode is CombineMode.AVERAGE else d * k
    if kind is ModelKind.MLP:
        network = MLP(d_in, n_outputs, config or MlpConfig(), rng)
    elif kind is ModelKind.RESNET:
        network = ResNet(d_in, n_outputs, config or ResNetConfig(), rng)
    elif kind is ModelKind.TRANSFORMER:
        network = Transformer(k, n_outputs, config or TransformerConfig(), rng)
    else:
        network = LinearModel(d_in, n_outputs, rng)
    doc = config.model_dump(mode="json") if config is not None else None
    model = TabularModel(kind, network, combine_mode, doc, k, d, n_outputs)
    model.set_generator(np.random.default_rng(rng.integers(2 ** 63)))
    return model
