"""Trainable scene representation.

A static field over xyz plus a dynamic field over three 3D space-time
subspaces (x,y,t), (x,z,t), (y,z,t), each backed by a multiresolution hash
grid, with small MLP heads for density and color. A cheaper pair of
density-only proposal fields mirrors them for importance sampling.

All fields are torch modules; gradients come from autograd. Checkpoints use
a self-describing binary format (magic ``DYN4D01``, length-prefixed JSON
manifest, raw little-endian float32 payloads) that round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"DYN4D01"

# per-dimension prime multipliers of the spatial hash
HASH_PRIMES = (1, 2654435761, 805459861)

# initial density after softplus, per unit length
INITIAL_DENSITY = 0.05


@dataclass
class HashGridConfig:
    n_levels: int = 16
    n_features_per_level: int = 2
    log2_hashmap_size: int = 19
    base_resolution: int = 16
    per_level_scale: float = 1.447

    def __post_init__(self):
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if self.per_level_scale <= 1.0:
            raise ValueError("per_level_scale must be > 1")
        if self.base_resolution < 2:
            raise ValueError("base_resolution must be >= 2")

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.n_features_per_level

    def level_resolution(self, level: int) -> int:
        return int(np.floor(self.base_resolution * self.per_level_scale**level))


# published configurations: radiance fields and the density proposal
RADIANCE_GRID = HashGridConfig(16, 2, 19, 16, 1.447)
PROPOSAL_GRID = HashGridConfig(8, 2, 19, 16, 1.447)


def _hash_corners(corners: torch.Tensor, table_size: int) -> torch.Tensor:
    """Spatial hash of integer corner coordinates, (..., 3) -> (...,)."""
    h = corners[..., 0] * HASH_PRIMES[0]
    h = torch.bitwise_xor(h, corners[..., 1] * HASH_PRIMES[1])
    h = torch.bitwise_xor(h, corners[..., 2] * HASH_PRIMES[2])
    return h % table_size


class HashGridField(nn.Module):
    """Multiresolution hash encoding over the unit cube (instant-NGP style).

    Each level trilinearly interpolates 8 corner features; corner indices map
    to table rows directly while the level's corner count fits the table and
    through the spatial hash otherwise. Level outputs are concatenated.
    """

    def __init__(self, config: HashGridConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.resolutions = [config.level_resolution(l) for l in range(config.n_levels)]
        max_size = 2**config.log2_hashmap_size
        self.table_sizes = []
        self.dense = []
        self.tables = nn.ParameterList()
        for res in self.resolutions:
            n_corners = (res + 1) ** 3
            dense = n_corners <= max_size
            size = n_corners if dense else max_size
            self.dense.append(dense)
            self.table_sizes.append(size)
            table = torch.empty(size, config.n_features_per_level, dtype=dtype)
            nn.init.uniform_(table, -1e-4, 1e-4)
            self.tables.append(nn.Parameter(table))

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        """Encode points in [0,1]^3, (N,3) -> (N, n_levels * n_features)."""
        p = points.clamp(0.0, 1.0)
        outputs = []
        corner_offsets = torch.tensor(
            [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)],
            dtype=torch.long, device=p.device,
        )  # (8,3)
        for level in range(self.config.n_levels):
            res = self.resolutions[level]
            scaled = p * res
            base = torch.clamp(scaled.floor().long(), max=res - 1)
            frac = scaled - base
            corners = base[:, None, :] + corner_offsets[None, :, :]  # (N,8,3)
            if self.dense[level]:
                s = res + 1
                idx = corners[..., 0] + corners[..., 1] * s + corners[..., 2] * (s * s)
            else:
                idx = _hash_corners(corners, self.table_sizes[level])
            feats = self.tables[level][idx]  # (N,8,F)
            w = torch.stack(
                [
                    torch.where(corner_offsets[:, d][None, :] == 1, frac[:, d, None], 1 - frac[:, d, None])
                    for d in range(3)
                ],
                dim=-1,
            ).prod(dim=-1)  # (N,8)
            outputs.append((feats * w[..., None]).sum(dim=1))
        return torch.cat(outputs, dim=-1)


class MLP(nn.Module):
    """Plain ReLU MLP with Kaiming-uniform init."""

    def __init__(self, in_dim: int, hidden_dims, out_dim: int,
                 out_bias: float = 0.0, dtype: torch.dtype = torch.float32):
        super().__init__()
        layers = []
        last = in_dim
        for h in hidden_dims:
            layers.append(nn.Linear(last, h, dtype=dtype))
            last = h
        layers.append(nn.Linear(last, out_dim, dtype=dtype))
        self.layers = nn.ModuleList(layers)
        for layer in self.layers:
            nn.init.kaiming_uniform_(layer.weight, nonlinearity="relu")
            nn.init.zeros_(layer.bias)
        nn.init.constant_(self.layers[-1].bias, out_bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[:-1]:
            x = F.relu(layer(x))
        return self.layers[-1](x)


def _density_bias(initial_density: float = INITIAL_DENSITY) -> float:
    # softplus(bias) == initial_density
    return float(np.log(np.expm1(initial_density)))


class StaticField(nn.Module):
    """Time-independent density and color over normalized xyz."""

    def __init__(self, grid_config: HashGridConfig = RADIANCE_GRID,
                 hidden: int = 64, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.grid = HashGridField(grid_config, dtype=dtype)
        d = self.grid.output_dim
        self.density_head = MLP(d, [hidden, hidden], 1, out_bias=_density_bias(), dtype=dtype)
        self.color_head = MLP(d, [hidden, hidden], 3, dtype=dtype)

    def forward(self, points: torch.Tensor) -> tuple:
        """points (N,3) in [0,1] -> (sigma (N,), color (N,3))."""
        feat = self.grid(points)
        sigma = F.softplus(self.density_head(feat).squeeze(-1))
        color = torch.sigmoid(self.color_head(feat))
        return sigma, color


class DynamicField(nn.Module):
    """Space-time density and color from three 3D subspace grids.

    Queries (x,y,t), (x,z,t), (y,z,t); the three embeddings are concatenated,
    fused by a small MLP, and decoded by density/color heads.
    """

    def __init__(self, grid_config: HashGridConfig = RADIANCE_GRID,
                 hidden: int = 64, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.grid_xyt = HashGridField(grid_config, dtype=dtype)
        self.grid_xzt = HashGridField(grid_config, dtype=dtype)
        self.grid_yzt = HashGridField(grid_config, dtype=dtype)
        d = 3 * self.grid_xyt.output_dim
        self.fusion_mlp = MLP(d, [hidden], hidden, dtype=dtype)
        self.density_head = MLP(hidden, [hidden, hidden], 1, out_bias=_density_bias(), dtype=dtype)
        self.color_head = MLP(hidden, [hidden, hidden], 3, dtype=dtype)

    def _fused(self, points: torch.Tensor, timestamp: torch.Tensor) -> torch.Tensor:
        t = timestamp.expand(points.shape[0])[:, None]
        x, y, z = points[:, 0:1], points[:, 1:2], points[:, 2:3]
        emb = torch.cat(
            [
                self.grid_xyt(torch.cat([x, y, t], dim=-1)),
                self.grid_xzt(torch.cat([x, z, t], dim=-1)),
                self.grid_yzt(torch.cat([y, z, t], dim=-1)),
            ],
            dim=-1,
        )
        return self.fusion_mlp(emb)

    def forward(self, points: torch.Tensor, timestamp: torch.Tensor) -> tuple:
        """points (N,3) in [0,1], scalar timestamp -> (sigma (N,), color (N,3))."""
        fused = self._fused(points, timestamp)
        sigma = F.softplus(self.density_head(fused).squeeze(-1))
        color = torch.sigmoid(self.color_head(fused))
        return sigma, color


class StaticProposal(nn.Module):
    def __init__(self, grid_config: HashGridConfig = PROPOSAL_GRID,
                 hidden: int = 64, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.grid = HashGridField(grid_config, dtype=dtype)
        self.density_head = MLP(self.grid.output_dim, [hidden], 1,
                                out_bias=_density_bias(), dtype=dtype)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.density_head(self.grid(points)).squeeze(-1))


class DynamicProposal(nn.Module):
    def __init__(self, grid_config: HashGridConfig = PROPOSAL_GRID,
                 hidden: int = 64, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.grid_xyt = HashGridField(grid_config, dtype=dtype)
        self.grid_xzt = HashGridField(grid_config, dtype=dtype)
        self.grid_yzt = HashGridField(grid_config, dtype=dtype)
        d = 3 * self.grid_xyt.output_dim
        self.fusion_mlp = MLP(d, [hidden], hidden, dtype=dtype)
        self.density_head = MLP(hidden, [hidden], 1, out_bias=_density_bias(), dtype=dtype)

    def forward(self, points: torch.Tensor, timestamp: torch.Tensor) -> torch.Tensor:
        t = timestamp.expand(points.shape[0])[:, None]
        x, y, z = points[:, 0:1], points[:, 1:2], points[:, 2:3]
        emb = torch.cat(
            [
                self.grid_xyt(torch.cat([x, y, t], dim=-1)),
                self.grid_xzt(torch.cat([x, z, t], dim=-1)),
                self.grid_yzt(torch.cat([y, z, t], dim=-1)),
            ],
            dim=-1,
        )
        return F.softplus(self.density_head(self.fusion_mlp(emb)).squeeze(-1))


class ProposalFieldPair(nn.Module):
    """Static + dynamic proposal densities, summed."""

    def __init__(self, grid_config: HashGridConfig = PROPOSAL_GRID,
                 hidden: int = 64, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.static = StaticProposal(grid_config, hidden, dtype)
        self.dynamic = DynamicProposal(grid_config, hidden, dtype)

    def forward(self, points: torch.Tensor, timestamp: torch.Tensor) -> torch.Tensor:
        return self.static(points) + self.dynamic(points, timestamp)


@dataclass
class SceneModelConfig:
    radiance_grid: HashGridConfig
    proposal_grid: HashGridConfig
    aabb_min: tuple
    aabb_max: tuple
    hidden: int = 64

    @classmethod
    def default(cls, aabb_min, aabb_max) -> "SceneModelConfig":
        return cls(
            radiance_grid=RADIANCE_GRID,
            proposal_grid=PROPOSAL_GRID,
            aabb_min=tuple(float(v) for v in aabb_min),
            aabb_max=tuple(float(v) for v in aabb_max),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneModelConfig":
        return cls(
            radiance_grid=HashGridConfig(**d["radiance_grid"]),
            proposal_grid=HashGridConfig(**d["proposal_grid"]),
            aabb_min=tuple(d["aabb_min"]),
            aabb_max=tuple(d["aabb_max"]),
            hidden=int(d.get("hidden", 64)),
        )


class SceneModel(nn.Module):
    """The full blended representation: static, dynamic, and proposal fields.

    World points are normalized into the unit cube by the stored AABB before
    any grid lookup.
    """

    def __init__(self, config: SceneModelConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.static = StaticField(config.radiance_grid, config.hidden, dtype)
        self.dynamic = DynamicField(config.radiance_grid, config.hidden, dtype)
        self.proposal = ProposalFieldPair(config.proposal_grid, config.hidden, dtype)
        self.register_buffer("aabb_min", torch.tensor(config.aabb_min, dtype=dtype))
        self.register_buffer("aabb_max", torch.tensor(config.aabb_max, dtype=dtype))

    def normalize(self, points: torch.Tensor) -> torch.Tensor:
        return ((points - self.aabb_min) / (self.aabb_max - self.aabb_min)).clamp(0.0, 1.0)

    def eval_static(self, points_world: torch.Tensor) -> tuple:
        return self.static(self.normalize(points_world))

    def eval_dynamic(self, points_world: torch.Tensor, timestamp: torch.Tensor) -> tuple:
        return self.dynamic(self.normalize(points_world), timestamp)

    def eval_blended(self, points_world: torch.Tensor, timestamp: torch.Tensor) -> tuple:
        """(sigma_s, c_s, sigma_d, c_d) at world points and one timestamp."""
        p = self.normalize(points_world)
        sigma_s, c_s = self.static(p)
        sigma_d, c_d = self.dynamic(p, timestamp)
        return sigma_s, c_s, sigma_d, c_d

    def eval_proposal(self, points_world: torch.Tensor, timestamp: torch.Tensor) -> torch.Tensor:
        return self.proposal(self.normalize(points_world), timestamp)


class ParameterStore:
    """Flat name -> parameter registry over a model, with gradient access."""

    def __init__(self, named_params):
        self._params = dict(named_params)
        names = list(self._params)
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterStore":
        return cls(module.named_parameters())

    def names(self) -> list:
        return list(self._params)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def gradient(self, name: str):
        return self._params[name].grad

    def zero_grad(self) -> None:
        for p in self._params.values():
            if p.grad is not None:
                p.grad.detach_()
                p.grad.zero_()

    def state_arrays(self) -> dict:
        """Detached float32 numpy copies, for checkpointing."""
        return {
            name: p.detach().to(torch.float32).cpu().numpy()
            for name, p in self._params.items()
        }

    def load_arrays(self, arrays: dict) -> None:
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        with torch.no_grad():
            for name, p in self._params.items():
                arr = torch.from_numpy(np.ascontiguousarray(arrays[name]))
                if tuple(arr.shape) != tuple(p.shape):
                    raise ValueError(f"{name}: shape {tuple(arr.shape)} != {tuple(p.shape)}")
                p.copy_(arr.to(p.dtype))


def save_checkpoint(path, params: dict, meta: dict) -> None:
    """Write arrays + metadata atomically in the DYN4D01 container format."""
    entries = []
    payloads = []
    offset = 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        entries.append(
            {"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset}
        )
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"meta": meta, "params": entries}).encode("utf-8")

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in payloads:
            fh.write(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple:
    """Read a DYN4D01 checkpoint; returns (params: dict of arrays, meta: dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (manifest_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(manifest_len).decode("utf-8"))
        payload = fh.read()
    params = {}
    for entry in manifest["params"]:
        if entry["dtype"] != "f32":
            raise ValueError(f"{entry['name']}: unsupported dtype {entry['dtype']}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        params[entry["name"]] = arr.reshape(shape).copy()
    return params, manifest["meta"]
