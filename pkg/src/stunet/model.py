"""U-shaped assembly of graph-convolutional recurrent layers.

The encoder runs a stack of GCGRU layers whose temporal dilation multiplies
by s at each stage and which pool one spatial level after each of the first
p stages. The decoder side mirrors it: unpool, concatenate the same-stage
encoder sequence, reconcile channels with a linear map, and run an undilated
GCGRU. A plain seq2seq decoder rolls out the horizon from the final state,
with a Chebyshev-convolution readout per step. With p=0 and s=1 the network
degenerates to a plain stacked-GCGRU seq2seq and is built as exactly that.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import CheckpointError, DimensionError, ModelError, UsageError
from .graph import ChebKernel, Graph, GraphLaplacian, cheb_conv, normalized_laplacian
from .partition import PartitionMap, multilevel_partition
from .recurrent import (
    DilationSchedule,
    GCGRUState,
    GCGRUWeights,
    decode,
    dilated_layer_forward,
    encode,
    init_gcgru_weights,
)
from .sampling import (
    UNPOOL_MODES,
    UnpoolStrategy,
    init_unpool,
    skip_concat,
    unpool,
)
from .tensor import Tensor

VARIANTS = ("GCGRU", "T-UNet", "S-UNet", "ST-UNet")

CHECKPOINT_MAGIC = b"STUN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class STUNetConfig:
    """Architecture hyperparameters; hidden_sizes has one width per stage."""

    k: int = 3
    p: int = 2
    s: int = 2
    hidden_sizes: tuple = (64, 64, 64)
    pool_mode: str = "max"
    unpool_mode: str = "direct_copy"
    layer_norm: bool = True
    j: int = 12
    h: int = 3
    d_in: int = 1
    d_out: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.k < 1 or self.p < 0 or self.s < 1:
            raise ModelError("require K >= 1, p >= 0, s >= 1")
        if self.j < 1 or self.h < 1 or self.d_in < 1 or self.d_out < 1:
            raise ModelError("require J, H, D_in, D_out >= 1")
        if not self.hidden_sizes or any(int(c) < 1 for c in self.hidden_sizes):
            raise ModelError("hidden_sizes must be positive")
        if self.p > len(self.hidden_sizes) - 1:
            raise ModelError(
                f"pooling level {self.p} needs at least {self.p + 1} stages, "
                f"got {len(self.hidden_sizes)}"
            )
        if self.pool_mode not in ("max", "mean"):
            raise ModelError(f"unknown pooling mode {self.pool_mode!r}")
        if self.unpool_mode not in UNPOOL_MODES:
            raise ModelError(f"unknown unpooling strategy {self.unpool_mode!r}")

    @property
    def is_plain_stack(self) -> bool:
        """No pooling and no dilation: the U collapses to a layer stack."""
        return self.p == 0 and self.s == 1

    @property
    def depth(self) -> int:
        return len(self.hidden_sizes) - 1

    def to_lines(self) -> str:
        hidden = ",".join(str(int(c)) for c in self.hidden_sizes)
        fields = [
            ("k", self.k), ("p", self.p), ("s", self.s), ("hidden_sizes", hidden),
            ("pool_mode", self.pool_mode), ("unpool_mode", self.unpool_mode),
            ("layer_norm", int(self.layer_norm)), ("j", self.j), ("h", self.h),
            ("d_in", self.d_in), ("d_out", self.d_out), ("seed", self.seed),
        ]
        return "".join(f"{k}={v}\n" for k, v in fields)

    @classmethod
    def from_lines(cls, text: str) -> "STUNetConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise CheckpointError(f"bad config line {line!r}")
            key, val = line.split("=", 1)
            kv[key] = val
        try:
            return cls(
                k=int(kv["k"]), p=int(kv["p"]), s=int(kv["s"]),
                hidden_sizes=tuple(int(c) for c in kv["hidden_sizes"].split(",")),
                pool_mode=kv["pool_mode"], unpool_mode=kv["unpool_mode"],
                layer_norm=bool(int(kv["layer_norm"])), j=int(kv["j"]),
                h=int(kv["h"]), d_in=int(kv["d_in"]), d_out=int(kv["d_out"]),
                seed=int(kv["seed"]),
            )
        except KeyError as exc:
            raise CheckpointError(f"config block missing key {exc}") from exc


def variant(config: STUNetConfig, which: str) -> STUNetConfig:
    """Ablation variants: disable pooling, dilation, neither, or both."""
    if which == "GCGRU":
        return replace(config, p=0, s=1)
    if which == "T-UNet":
        return replace(config, p=0)
    if which == "S-UNet":
        return replace(config, s=1)
    if which == "ST-UNet":
        return config
    raise UsageError(f"unknown variant {which!r}; expected one of {VARIANTS}")


@dataclass
class STUNetParams:
    """Every learnable tensor and persistent buffer, each registered once."""

    entries: list  # (name, Tensor) in registration order
    buffer_names: set

    def register(self, name: str, t: Tensor) -> Tensor:
        if any(n == name for n, _ in self.entries):
            raise ModelError(f"duplicate parameter name {name!r}")
        self.entries.append((name, t))
        return t

    def register_buffer(self, name: str, t: Tensor) -> Tensor:
        self.register(name, t)
        self.buffer_names.add(name)
        return t

    def trainable(self) -> list:
        return [t for n, t in self.entries if n not in self.buffer_names]


class STUNet:
    """Built model: parameters plus the cached partition and Laplacians."""

    def __init__(self, config: STUNetConfig, graph: Graph):
        config.validate()
        self.config = config
        self.graph = graph
        self.pm: PartitionMap | None = None
        if config.p > 0:
            self.pm = multilevel_partition(graph, config.p)
            graphs = self.pm.graphs
        else:
            graphs = [graph]
        self.laps = [normalized_laplacian(g) for g in graphs]
        self.params = STUNetParams(entries=[], buffer_names=set())
        self._init_params(np.random.default_rng(config.seed))
        # persistent normalization buffers, identity until a trainer fits them
        self.norm_mean = self.params.register_buffer(
            "norm.mean", Tensor(np.zeros(config.d_in))
        )
        self.norm_std = self.params.register_buffer(
            "norm.std", Tensor(np.ones(config.d_in))
        )

    # -- construction ------------------------------------------------------

    def _lap_at_stage(self, k: int) -> GraphLaplacian:
        return self.laps[min(k, self.config.p)]

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.config
        reg = self.params.register
        self.enc_layers = []
        widths = [cfg.d_in] + [int(c) for c in cfg.hidden_sizes]
        for k in range(len(cfg.hidden_sizes)):
            w = init_gcgru_weights(rng, cfg.k, widths[k], widths[k + 1], cfg.layer_norm)
            self._register_cell(f"enc{k}", w)
            self.enc_layers.append(w)
        self.up_fuse: list = []
        self.up_layers: list = []
        self.unpools: list = []
        if not cfg.is_plain_stack:
            hidden = [int(c) for c in cfg.hidden_sizes]
            for k in range(cfg.depth - 1, -1, -1):
                if k < cfg.p:
                    up = init_unpool(rng, cfg.unpool_mode, hidden[k + 1])
                    for i, t in enumerate(up.params()):
                        reg(f"up{k}.unpool{i}", t)
                else:
                    up = None
                fuse = T.glorot_from(rng, (hidden[k + 1] + hidden[k], hidden[k]))
                reg(f"up{k}.fuse", fuse)
                cell = init_gcgru_weights(rng, cfg.k, hidden[k], hidden[k], cfg.layer_norm)
                self._register_cell(f"up{k}.cell", cell)
                self.unpools.insert(0, up)
                self.up_fuse.insert(0, fuse)
                self.up_layers.insert(0, cell)
        dec_width = self._decoder_width()
        self.dec = init_gcgru_weights(rng, cfg.k, cfg.d_out, dec_width, cfg.layer_norm)
        self._register_cell("dec", self.dec)
        self.readout_k = ChebKernel.init(rng, cfg.k, cfg.d_out, dec_width)
        reg("readout.theta", self.readout_k.theta)
        self.readout_b = reg(
            "readout.bias", Tensor(np.zeros(cfg.d_out), requires_grad=True)
        )

    def _register_cell(self, prefix: str, w: GCGRUWeights) -> None:
        names = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"]
        if w.ln_gain is not None:
            names += ["ln_gain", "ln_bias"]
        for name, t in zip(names, w.params()):
            self.params.register(f"{prefix}.{name}", t)

    def _decoder_width(self) -> int:
        cfg = self.config
        if cfg.is_plain_stack:
            return int(cfg.hidden_sizes[-1])
        return int(cfg.hidden_sizes[0])

    # -- forward -----------------------------------------------------------

    def readout(self, h: Tensor) -> Tensor:
        return T.add_bias(cheb_conv(self.readout_k, self.laps[0], h), self.readout_b)

    def forward(
        self,
        inputs: Tensor,
        targets: Tensor | None = None,
        eps: float = 0.0,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        cfg = self.config
        if inputs.data.ndim < 3 or inputs.data.shape[0] != cfg.j:
            raise DimensionError(
                f"inputs must be (J={cfg.j}, ..., N, D_in), got {inputs.data.shape}"
            )
        if inputs.data.shape[-2] != self.graph.n or inputs.data.shape[-1] != cfg.d_in:
            raise DimensionError(
                f"inputs trailing extents {inputs.data.shape[-2:]} do not match "
                f"(N={self.graph.n}, D_in={cfg.d_in})"
            )
        stages = len(cfg.hidden_sizes)
        dilations = [1] * stages if cfg.is_plain_stack else [
            cfg.s ** k for k in range(stages)
        ]
        enc_outs, enc_finals = encode(
            self.enc_layers,
            [self._lap_at_stage(k) for k in range(stages)],
            inputs,
            DilationSchedule(dilations),
            pm=self.pm,
            pool_mode=cfg.pool_mode,
            pool_levels=cfg.p,
        )
        if cfg.is_plain_stack:
            dec_init = enc_finals[-1]
        else:
            x = enc_outs[-1]
            for k in range(cfg.depth - 1, -1, -1):
                if k < cfg.p:
                    x = unpool(x, self.pm, self.unpools[k], from_level=k + 1, to_level=k)
                x = skip_concat(x, enc_outs[k])
                x = T.matmul(x, self.up_fuse[k])
                x = dilated_layer_forward(self.up_layers[k], self._lap_at_stage(k), x, 1)
            dec_init = GCGRUState(T.select_step(x, cfg.j - 1))
        go = Tensor(np.zeros(inputs.data.shape[1:-1] + (cfg.d_out,)))
        return decode(
            self.dec,
            self.laps[0],
            dec_init,
            cfg.h,
            go,
            self.readout,
            eps=eps,
            targets=targets,
            rng=rng,
        )

    def trainable_params(self) -> list:
        return self.params.trainable()


def build(config: STUNetConfig, graph: Graph) -> STUNet:
    """Partition, precompute Laplacians, and draw all parameters from seed."""
    return STUNet(config, graph)


def loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of the L1 and L2 losses over all elements."""
    if pred.data.shape != target.data.shape:
        raise DimensionError(
            f"loss shapes differ: {pred.data.shape} vs {target.data.shape}"
        )
    err = T.sub(pred, target)
    l1 = T._reduce_mean(T._abs(err))
    l2 = T._reduce_mean(T.hadamard(err, err))
    return T.scale(T.add(l1, l2), 0.5)


# -- checkpoint container ---------------------------------------------------


def save_checkpoint(model: STUNet, path: str) -> None:
    """Bit-exact container: magic, version, config text block, then every
    registered tensor in registration order."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_block = model.config.to_lines().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_block)))
    buf.write(cfg_block)
    for name, t in model.params.entries:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", t.data.ndim))
        for extent in t.data.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint truncated")
    return b


def read_checkpoint_config(path: str) -> STUNetConfig:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        return STUNetConfig.from_lines(_read_exact(fh, n).decode("utf-8"))


def load_checkpoint(path: str, graph: Graph) -> STUNet:
    """Rebuild the model from the stored config and restore every tensor."""
    config = read_checkpoint_config(path)
    model = build(config, graph)
    with open(path, "rb") as fh:
        fh.seek(4 + 4)
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        fh.seek(n, 1)
        for name, t in model.params.entries:
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            stored = _read_exact(fh, name_len).decode("utf-8")
            if stored != name:
                raise CheckpointError(
                    f"{path}: parameter order mismatch ({stored!r} != {name!r})"
                )
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(rank)
            )
            if shape != t.data.shape:
                raise CheckpointError(
                    f"{path}: shape mismatch for {name}: {shape} != {t.data.shape}"
                )
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 8 * count)
            t.data[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after parameters")
    return model
