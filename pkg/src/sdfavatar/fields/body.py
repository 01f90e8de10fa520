"""Structured local implicit fields for the clothed body.

A set of N nodes sampled on the template carries tiny local MLPs whose
feature outputs are blended with Gaussian-falloff weights
``w_i = max(exp(-|p - n_i|^2 / 2 sigma^2) - eps, 0)`` and decoded by blending
MLPs into SDF and color. Color additionally samples a pose-regressed 32x32
dynamic feature patch per node via an orthographic per-node projection.
Pose conditioning predicts per-node residual motions and detail embeddings
(variational: mean + log-variance) from the pose vector.
"""

import hashlib
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..geom.encoding import positional_encoding, encoding_dim, COORD_OCTAVES, VIEW_OCTAVES
from ..geom.skinning import Pose, skinning_matrices, blend_vertex_matrices
from ..geom.sampling import farthest_point_sample
from ..geom.template import SkinnedTemplate
from ..nn import ops
from ..nn.tape import Tape, Node, value_of, ScatterPlan
from ..nn.mlp import (MlpParams, StackedMlpParams, mlp_init, stack_mlps,
                      mlp_forward_nodes, stacked_mlp_forward)
from ..nn.conv import ConvNetParams, conv_net_init, conv_forward, conv3x3, bilinear_sample
from .params import ParamBinding, collect_named_arrays

PATCH_RES = 32


@dataclass
class BodyFieldConfig:
    n_nodes: int = 128
    sigma: float = 0.05
    epsilon: float = 0.001
    embed_dim: int = 8
    geo_width: int = 64
    geo_feat: int = 32
    color_width: int = 64
    color_feat: int = 32
    blend_width: int = 64
    pose_width: int = 128
    patch_pe_channels: int = 8
    patch_hidden: int = 32
    patch_channels: int = 32
    patch_extent: float = 0.1  # meters spanned by a 32x32 patch
    residual_scale: float = 0.1  # tanh bound on node residual motion (m)

    @property
    def influence_radius(self) -> float:
        return self.sigma * np.sqrt(2.0 * np.log(1.0 / self.epsilon))


@dataclass
class NodeSet:
    """Rest node positions with inherited skinning weights and projections."""

    rest_positions: np.ndarray  # (N, 3)
    skin_weights: np.ndarray  # (N, J)
    proj: np.ndarray  # (N, 2, 3), orthonormal rows
    sigma: float
    epsilon: float

    def __post_init__(self):
        if self.sigma <= 0 or not (0 < self.epsilon < 1):
            raise ValueError("invalid influence parameters")

    @property
    def count(self) -> int:
        return len(self.rest_positions)

    @property
    def influence_radius(self) -> float:
        return self.sigma * np.sqrt(2.0 * np.log(1.0 / self.epsilon))


def _orthonormal_rows(direction: np.ndarray) -> np.ndarray:
    """Two orthonormal rows spanning the plane perpendicular to ``direction``."""
    d = direction / max(np.linalg.norm(direction), 1e-12)
    helper = np.array([0.0, 1.0, 0.0]) if abs(d[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    v = np.cross(d, u)
    return np.stack([u, v])


def build_node_set(template: SkinnedTemplate, config: BodyFieldConfig,
                   start_vertex: int = 0) -> NodeSet:
    """Sample N nodes by farthest point sampling; inherit the seed vertex's
    skinning weights; projection direction = mean vertex normal within sigma."""
    verts = template.mesh.vertices
    idx = farthest_point_sample(verts, config.n_nodes, start=start_vertex)
    rest = verts[idx]
    weights = template.skin_weights[idx]
    normals = template.mesh.vertex_pseudo_normals
    proj = np.zeros((config.n_nodes, 2, 3))
    for i, p in enumerate(rest):
        near = np.linalg.norm(verts - p, axis=1) < config.sigma
        n = normals[near].sum(axis=0)
        if np.linalg.norm(n) < 1e-9:
            n = normals[idx[i]]
        proj[i] = _orthonormal_rows(n)
    return NodeSet(rest, weights, proj, config.sigma, config.epsilon)


@dataclass
class BodyFieldParams:
    geo_local: StackedMlpParams  # N nets: PE(p_i) + e -> feature
    geo_blend: MlpParams  # feature -> sdf
    col_local: StackedMlpParams  # PE(p_i) + PE(v) + e + patch -> feature
    col_blend: MlpParams  # feature -> rgb logits
    patch_nets: ConvNetParams  # grouped per node
    patch_pe: np.ndarray  # (N, 32, 32, pe_ch) learnable positional encoding
    pose_encoder: MlpParams  # pose -> per-node (dn, e_mean, e_logvar)
    config: BodyFieldConfig

    def named_arrays(self, prefix: str = "body"):
        yield from self.geo_local.named_arrays(f"{prefix}.geo_local")
        yield from self.geo_blend.named_arrays(f"{prefix}.geo_blend")
        yield from self.col_local.named_arrays(f"{prefix}.col_local")
        yield from self.col_blend.named_arrays(f"{prefix}.col_blend")
        yield from self.patch_nets.named_arrays(f"{prefix}.patch")
        yield f"{prefix}.patch_pe", self.patch_pe
        yield from self.pose_encoder.named_arrays(f"{prefix}.pose_enc")

    @staticmethod
    def geometry_prefixes(prefix: str = "body"):
        """Parameter groups that define geometry (frozen in pass II)."""
        return (f"{prefix}.geo_local", f"{prefix}.geo_blend", f"{prefix}.pose_enc")


def init_body_params(rng: np.random.Generator, config: BodyFieldConfig,
                     pose_dim: int, dtype=np.float32) -> BodyFieldParams:
    pe_p = encoding_dim(3, COORD_OCTAVES)
    pe_v = encoding_dim(3, VIEW_OCTAVES)
    E = config.embed_dim
    N = config.n_nodes
    geo_locals = [mlp_init(rng, [pe_p + E, config.geo_width, config.geo_width,
                                 config.geo_feat], activation="elu", dtype=dtype)
                  for _ in range(N)]
    col_locals = [mlp_init(rng, [pe_p + pe_v + E + config.patch_channels,
                                 config.color_width, config.color_width,
                                 config.color_feat], activation="relu", dtype=dtype)
                  for _ in range(N)]
    geo_blend = mlp_init(rng, [config.geo_feat, config.blend_width, 1],
                         activation="elu", dtype=dtype)
    # Positive initial bias: the untrained field reads as ~+5 cm everywhere,
    # which volume rendering can carve from.
    geo_blend.biases[-1][:] = 0.05
    col_blend = mlp_init(rng, [config.color_feat, config.blend_width, 3],
                         activation="relu", dtype=dtype)
    patch_nets = conv_net_init(
        rng, [E + config.patch_pe_channels, config.patch_hidden, config.patch_channels],
        groups=N, dtype=dtype)
    patch_pe = rng.uniform(-0.1, 0.1, size=(N, PATCH_RES, PATCH_RES,
                                            config.patch_pe_channels)).astype(dtype)
    out_dim = N * (3 + 2 * E)
    pose_encoder = mlp_init(rng, [pose_dim, config.pose_width, config.pose_width,
                                  out_dim], activation="elu", dtype=dtype)
    # Start near zero residuals/embeddings so posed nodes equal skinned rest nodes.
    pose_encoder.weights[-1][:] *= 0.01
    return BodyFieldParams(
        geo_local=stack_mlps(geo_locals),
        geo_blend=geo_blend,
        col_local=stack_mlps(col_locals),
        col_blend=col_blend,
        patch_nets=patch_nets,
        patch_pe=patch_pe,
        pose_encoder=pose_encoder,
        config=config,
    )


@dataclass
class PoseConditionedState:
    """Immutable pose-conditioned snapshot of the body field."""

    pose: Pose
    T: np.ndarray  # (N, 4, 4) per-node skinning matrices
    T_inv: np.ndarray
    delta: object  # (N, 3) Node or ndarray
    e: object  # (N, E)
    e_mean: object
    e_logvar: object
    n_posed: object  # (N, 3)
    patches: object  # (N, 32, 32, C)
    token: str

    @property
    def n_posed_value(self) -> np.ndarray:
        return value_of(self.n_posed)


class NodeBuckets:
    """Point-node covering pairs with padding/scatter plans for batched MLPs."""

    def __init__(self, points: np.ndarray, n_posed: np.ndarray,
                 sigma: float, epsilon: float, n_nodes: int):
        self.points = points
        P = len(points)
        cutoff2 = (sigma * np.sqrt(2.0 * np.log(1.0 / epsilon))) ** 2
        # Pair list via a dense (chunked) distance matrix: N is small (128).
        pt_list, nd_list = [], []
        chunk = max(1, 8_000_000 // max(n_nodes, 1))
        for s in range(0, P, chunk):
            d2 = ((points[s:s + chunk, None, :] - n_posed[None, :, :]) ** 2).sum(axis=2)
            pi, ni = np.nonzero(d2 <= cutoff2)
            pt_list.append(pi + s)
            nd_list.append(ni)
        self.pt_idx = np.concatenate(pt_list) if pt_list else np.zeros(0, dtype=np.int64)
        self.node_idx = np.concatenate(nd_list) if nd_list else np.zeros(0, dtype=np.int64)
        self._finalize(P, n_nodes)

    def _finalize(self, n_points: int, n_nodes: int):
        order = np.argsort(self.node_idx, kind="stable")
        self.pt_idx = self.pt_idx[order]
        self.node_idx = self.node_idx[order]
        K = len(self.pt_idx)
        self.n_pairs = K
        self.n_nodes = n_nodes
        counts = np.bincount(self.node_idx, minlength=n_nodes)
        self.counts = counts
        self.max_count = int(counts.max()) if K else 0
        M = self.max_count
        # Padded layout: slot (node, j) <- pair row; dummy row K for padding.
        self.pad_idx = np.full(n_nodes * M, K, dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        within = np.arange(K) - np.repeat(starts, counts)
        flat_slots = self.node_idx * M + within
        self.pad_idx[flat_slots] = np.arange(K)
        self.unpad_idx = flat_slots
        self.covered = np.unique(self.pt_idx)
        self.covered_count = len(self.covered)
        # Compact point indices: pair -> covered-slot.
        remap = np.full(n_points, -1, dtype=np.int64)
        remap[self.covered] = np.arange(self.covered_count)
        self.pair_to_cov = remap[self.pt_idx]
        # Scatter plans reused by every gather/scatter on this bucket set.
        self.plan_cov = ScatterPlan(self.pair_to_cov, self.covered_count)
        self.plan_nodes = ScatterPlan(self.node_idx, n_nodes)

    def pad(self, tape, pair_rows, dim: int):
        """(K, D) pair rows -> (N, M, D) padded; dummy row is zeros.

        Every real pair occupies exactly one slot, so the backward is a plain
        indexed assignment (duplicate writes only hit the discarded dummy).
        """
        rows = pair_rows
        zero = np.zeros((1, dim), dtype=value_of(rows).dtype)
        ext = ops.concat(tape, [rows, zero], axis=0)
        padded = ops.gather_rows(tape, ext, self.pad_idx, unique=True)
        return ops.reshape(tape, padded, (self.n_nodes, self.max_count, dim))

    def unpad(self, tape, padded, dim: int):
        flat = ops.reshape(tape, padded, (self.n_nodes * self.max_count, dim))
        return ops.gather_rows(tape, flat, self.unpad_idx, unique=True)

    def blend(self, tape, pair_feats, w_pairs, dim: int):
        """Eq. 3 feature fusion: sum(w f) / sum(w) over covering nodes."""
        wf = ops.mul(tape, pair_feats, ops.reshape(tape, w_pairs, (self.n_pairs, 1)))
        num = ops.scatter_sum(tape, wf, self.plan_cov)
        den = ops.scatter_sum(tape, ops.reshape(tape, w_pairs, (self.n_pairs, 1)),
                              self.plan_cov)
        return ops.div(tape, num, den)


class BodyField:
    """Bundles node set + parameters and exposes conditioning and queries."""

    def __init__(self, node_set: NodeSet, params: BodyFieldParams):
        self.node_set = node_set
        self.params = params
        self.config = params.config
        self.dtype = params.geo_blend.weights[0].dtype

    # -- conditioning --------------------------------------------------------

    def condition(self, skeleton, pose: Pose, tape: Optional[Tape] = None,
                  binding: Optional[ParamBinding] = None,
                  rng: Optional[np.random.Generator] = None) -> PoseConditionedState:
        """Compute per-node transforms, residuals, embeddings, and patches.

        Inference (`tape=None`) uses the embedding mean; training with ``rng``
        draws the variational sample mean + noise * exp(logvar / 2).
        """
        binding = binding or ParamBinding(tape)
        cfg = self.config
        Tj = skinning_matrices(skeleton, pose)
        T = blend_vertex_matrices(self.node_set.skin_weights, Tj)
        T_inv = np.linalg.inv(T)
        pose_vec = pose.flat().astype(self.dtype)[None, :]
        enc = self.params.pose_encoder
        out = mlp_forward_nodes(enc, pose_vec, tape, binding.mlp("body.pose_enc", enc))
        N, E = cfg.n_nodes, cfg.embed_dim
        out = ops.reshape(tape, out, (N, 3 + 2 * E))
        raw_dn = ops.reshape(tape, _slice_cols(tape, out, 0, 3), (N, 3))
        delta = ops.mul(tape, ops.tanh(tape, raw_dn), np.float32(cfg.residual_scale))
        e_mean = _slice_cols(tape, out, 3, 3 + E)
        e_logvar = _slice_cols(tape, out, 3 + E, 3 + 2 * E)
        if rng is not None and tape is not None:
            noise = rng.standard_normal((N, E)).astype(self.dtype)
            std = ops.exp(tape, ops.mul(tape, e_logvar, np.float32(0.5)))
            e = ops.add(tape, e_mean, ops.mul(tape, std, noise))
        else:
            e = e_mean
        # Posed node positions: n_i = T_i (rest + delta).
        R = T[:, :3, :3].astype(self.dtype)
        t = T[:, :3, 3].astype(self.dtype)
        rest = self.node_set.rest_positions.astype(self.dtype)
        shifted = ops.add(tape, rest, delta)
        n_posed = ops.add(
            tape,
            ops.reshape(tape, ops.matmul(tape, R, ops.reshape(tape, shifted, (N, 3, 1))),
                        (N, 3)),
            t,
        )
        patches = self._patch_maps(tape, binding, e)
        token = hashlib.sha1(
            pose.flat().tobytes() + pose.root.tobytes() + str(id(self.params)).encode()
        ).hexdigest()[:16]
        return PoseConditionedState(
            pose=pose, T=T, T_inv=T_inv, delta=delta, e=e, e_mean=e_mean,
            e_logvar=e_logvar, n_posed=n_posed, patches=patches, token=token,
        )

    def _patch_maps(self, tape, binding: ParamBinding, e):
        """Regress the 32x32 dynamic feature patches from (e, learnable PE).

        The first conv layer is split by linearity of convolution over input
        channels: the learnable-PE half does not depend on the pose, so its
        convolution is computed once per tape (memoized on the binding), and
        the spatially-constant embedding half reduces to nine boundary-region
        linear maps. Bit-equivalent to convolving the concatenated input.
        """
        cfg = self.config
        N, E = cfg.n_nodes, cfg.embed_dim
        net = self.params.patch_nets
        pe_maps = binding.get("body.patch_pe", self.params.patch_pe)
        conv_nodes = binding.conv("body.patch", net)
        if len(net.kernels) != 2:
            ones = np.ones((1, PATCH_RES, PATCH_RES, 1), dtype=value_of(e).dtype)
            e_maps = ops.mul(tape, ops.reshape(tape, e, (N, 1, 1, E)), ones)
            patch_in = ops.concat(tape, [e_maps, pe_maps], axis=3)
            return conv_forward(net, patch_in, tape, conv_nodes)
        k0, b0 = conv_nodes[0]
        memo = getattr(binding, "_patch_pe_memo", None)
        if memo is None:
            k0_pe = ops.slice_axis(tape, k0, 2, E, E + cfg.patch_pe_channels)
            memo = conv3x3(tape, pe_maps, k0_pe, b0)
            binding._patch_pe_memo = memo
        # Embedding half: per-region tap sums act as nine (E -> hidden) maps.
        k0_e = ops.slice_axis(tape, k0, 2, 0, E)  # (N, Ch, E, 3, 3)
        region_parts = []
        for yband in range(3):
            kys = {0: (1, 2), 1: (0, 1, 2), 2: (0, 1)}[yband]
            for xband in range(3):
                kxs = {0: (1, 2), 1: (0, 1, 2), 2: (0, 1)}[xband]
                acc = None
                for ky in kys:
                    row = ops.slice_axis(tape, k0_e, 3, ky, ky + 1)
                    for kx in kxs:
                        tap = ops.reshape(
                            tape, ops.slice_axis(tape, row, 4, kx, kx + 1),
                            (N, net.kernels[0].shape[1], E))
                        acc = tap if acc is None else ops.add(tape, acc, tap)
                region_parts.append(ops.transpose(tape, acc, (0, 2, 1)))  # (N,E,Ch)
        T = ops.concat(tape, [ops.reshape(tape, r, (N, 1, E, -1))
                              for r in region_parts], axis=1)  # (N, 9, E, Ch)
        ch = net.kernels[0].shape[1]
        e4 = ops.reshape(tape, e, (N, 1, 1, E))
        ones9 = np.ones((1, 9, 1, E), dtype=value_of(e).dtype)
        e9 = ops.mul(tape, e4, ones9)  # (N, 9, 1, E)
        region_vals = ops.reshape(tape, ops.matmul(tape, e9, T), (N * 9, ch))
        gather_idx = self._patch_region_gather_idx()
        e_contrib = ops.reshape(
            tape, ops.gather_rows(tape, region_vals, gather_idx),
            (N, PATCH_RES, PATCH_RES, ch))
        h = ops.add(tape, memo, e_contrib)
        if net.activations[0] == "relu":
            h = ops.relu(tape, h)
        elif net.activations[0] == "elu":
            h = ops.elu(tape, h)
        k1, b1 = conv_nodes[1]
        out = conv3x3(tape, h, k1, b1)
        if net.activations[1] == "relu":
            out = ops.relu(tape, out)
        elif net.activations[1] == "elu":
            out = ops.elu(tape, out)
        return out

    def _patch_region_gather_idx(self) -> np.ndarray:
        idx = getattr(self, "_region_idx_cache", None)
        if idx is None:
            r = PATCH_RES
            band = np.ones(r, dtype=np.int64)
            band[0] = 0
            band[-1] = 2
            region = band[:, None] * 3 + band[None, :]
            per_node = region.reshape(-1)[None, :]  # (1, 1024)
            offsets = (np.arange(self.config.n_nodes) * 9)[:, None]
            idx = (per_node + offsets).reshape(-1)
            self._region_idx_cache = idx
        return idx

    # -- query helpers --------------------------------------------------------

    def buckets(self, points: np.ndarray, state: PoseConditionedState) -> NodeBuckets:
        return NodeBuckets(np.asarray(points, dtype=np.float64),
                           state.n_posed_value.astype(np.float64),
                           self.node_set.sigma, self.node_set.epsilon,
                           value_of(state.n_posed).shape[0])

    def fuse_states(self, tape, states, point_counts):
        """Concatenate per-pose states into one virtual field of P*N nodes.

        Training batches condition several frames at once; fusing them lets
        one bucket set and one batched-MLP stack serve the whole batch. Local
        MLP/patch parameters are shared across the tiled node axis (their
        gradients sum automatically through broadcasting).
        """
        n = self.config.n_nodes
        P = len(states)
        fused = PoseConditionedState(
            pose=states[0].pose,
            T=np.concatenate([s.T for s in states]),
            T_inv=np.concatenate([s.T_inv for s in states]),
            delta=ops.concat(tape, [s.delta for s in states], axis=0),
            e=ops.concat(tape, [s.e for s in states], axis=0),
            e_mean=ops.concat(tape, [s.e_mean for s in states], axis=0),
            e_logvar=ops.concat(tape, [s.e_logvar for s in states], axis=0),
            n_posed=ops.concat(tape, [s.n_posed for s in states], axis=0),
            patches=ops.concat(tape, [s.patches for s in states], axis=0),
            token="fused:" + ",".join(s.token for s in states),
        )
        return fused

    def fused_buckets(self, points: np.ndarray, frame_of_point: np.ndarray,
                      fused_state) -> NodeBuckets:
        """Buckets against a fused multi-pose state: each point only pairs
        with its own frame's node block (node ids offset by frame * N)."""
        n = self.config.n_nodes
        pts = np.asarray(points, dtype=np.float64)
        n_posed = fused_state.n_posed_value.astype(np.float64)
        n_frames = len(n_posed) // n
        cutoff2 = self.node_set.influence_radius ** 2
        pt_list, nd_list = [], []
        for f in range(n_frames):
            sel = np.nonzero(frame_of_point == f)[0]
            if not len(sel):
                continue
            d2 = ((pts[sel, None, :] - n_posed[None, f * n:(f + 1) * n, :]) ** 2).sum(axis=2)
            pi, ni = np.nonzero(d2 <= cutoff2)
            pt_list.append(sel[pi])
            nd_list.append(ni + f * n)
        bk = NodeBuckets.__new__(NodeBuckets)
        bk.points = pts
        bk.pt_idx = (np.concatenate(pt_list) if pt_list else np.zeros(0, dtype=np.int64))
        bk.node_idx = (np.concatenate(nd_list) if nd_list else np.zeros(0, dtype=np.int64))
        bk._finalize(len(pts), len(n_posed))
        return bk

    def pair_geometry(self, tape, state: PoseConditionedState, bk: NodeBuckets):
        """Per-pair blend weights and local coordinates (both tape-aware)."""
        pts = bk.points.astype(self.dtype)
        p_pairs = pts[bk.pt_idx]
        n_pairs = ops.gather_rows(tape, state.n_posed, bk.node_idx, bk.plan_nodes)
        diff = ops.sub(tape, p_pairs, n_pairs)
        d2 = ops.sum_(tape, ops.square(tape, diff), axis=1)
        sig2 = np.float32(2.0 * self.node_set.sigma ** 2)
        w = ops.maximum_const(
            tape,
            ops.sub(tape, ops.exp(tape, ops.div(tape, ops.neg(tape, d2), sig2)),
                    np.float32(self.node_set.epsilon)),
            0.0,
        )
        # Local coordinates p_i = T_i^-1 p - (rest + delta). Fused multi-pose
        # states tile the node axis; parameter-side arrays index modulo N.
        base_idx = bk.node_idx % self.config.n_nodes
        Tinv = state.T_inv[bk.node_idx]
        p_local_const = (
            np.einsum("kab,kb->ka", Tinv[:, :3, :3], bk.points[bk.pt_idx])
            + Tinv[:, :3, 3]
        ).astype(self.dtype)
        rest_pairs = self.node_set.rest_positions[base_idx].astype(self.dtype)
        delta_pairs = ops.gather_rows(tape, state.delta, bk.node_idx, bk.plan_nodes)
        p_i = ops.sub(tape, p_local_const - rest_pairs, delta_pairs)
        return w, p_i

    def _stack_eval(self, tape, binding, bk: NodeBuckets, feats_in, stacked, prefix):
        """Pad -> batched-MLP -> unpad, tiling weights across fused frames."""
        din = stacked.in_dim
        dout = stacked.out_dim
        padded = bk.pad(tape, feats_in, din)
        n = self.config.n_nodes
        frames = bk.n_nodes // n
        nodes = binding.mlp(prefix, stacked)
        if frames > 1:
            padded = ops.reshape(tape, padded, (frames, n, bk.max_count, din))
        out = stacked_mlp_forward(stacked, padded, tape, nodes)
        if frames > 1:
            out = ops.reshape(tape, out, (bk.n_nodes, bk.max_count, dout))
        return bk.unpad(tape, out, dout)

    def sdf(self, points: np.ndarray, state: PoseConditionedState,
            tape: Optional[Tape] = None, binding: Optional[ParamBinding] = None,
            bk: Optional[NodeBuckets] = None, counters=None,
            fallback: Optional[np.ndarray] = None):
        """Composed body SDF over arbitrary points, with empty-space fallback.

        Returns (values (P,), covered mask (P,)). ``values`` is a Node when a
        tape is given.
        """
        binding = binding or ParamBinding(tape)
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if bk is None:
            bk = self.buckets(pts, state)
        if fallback is None:
            fallback = self.fallback_sdf(pts, state)
        if counters is not None:
            counters.add("body_sdf_points", bk.covered_count)
            counters.add("body_sdf_pairs", bk.n_pairs)
        if bk.covered_count == 0:
            return fallback, np.zeros(len(pts), dtype=bool)
        w, p_i = self.pair_geometry(tape, state, bk)
        pe = _pe_tape(tape, p_i, COORD_OCTAVES)
        e_pairs = ops.gather_rows(tape, state.e, bk.node_idx, bk.plan_nodes)
        feats_in = ops.concat(tape, [pe, e_pairs], axis=1)
        pair_feats = self._stack_eval(tape, binding, bk, feats_in,
                                      self.params.geo_local, "body.geo_local")
        fused = bk.blend(tape, pair_feats, w, self.params.geo_local.out_dim)
        sdf_cov = mlp_forward_nodes(self.params.geo_blend, fused, tape,
                                    binding.mlp("body.geo_blend", self.params.geo_blend))
        sdf_cov = ops.reshape(tape, sdf_cov, (bk.covered_count,))
        values = ops.assign_rows(tape, fallback.astype(self.dtype), bk.covered,
                                 sdf_cov)
        covered = np.zeros(len(pts), dtype=bool)
        covered[bk.covered] = True
        return values, covered

    def color(self, points: np.ndarray, viewdirs: np.ndarray,
              state: PoseConditionedState, tape: Optional[Tape] = None,
              binding: Optional[ParamBinding] = None,
              bk: Optional[NodeBuckets] = None, counters=None):
        """Body color in [0,1]^3; uncovered points report the covered mask so
        the caller can substitute the background."""
        binding = binding or ParamBinding(tape)
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dirs = np.atleast_2d(np.asarray(viewdirs, dtype=np.float64))
        if bk is None:
            bk = self.buckets(pts, state)
        covered = np.zeros(len(pts), dtype=bool)
        covered[bk.covered] = True
        if counters is not None:
            counters.add("color_points", bk.covered_count)
            counters.add("color_pairs", bk.n_pairs)
        if bk.covered_count == 0:
            return np.zeros((len(pts), 3), dtype=self.dtype), covered
        cfg = self.config
        w, p_i = self.pair_geometry(tape, state, bk)
        pe_p = _pe_tape(tape, p_i, COORD_OCTAVES)
        pe_v = positional_encoding(dirs[bk.pt_idx], VIEW_OCTAVES).astype(self.dtype)
        e_pairs = ops.gather_rows(tape, state.e, bk.node_idx, bk.plan_nodes)
        # Patch lookup: project local coords with the per-node 2x3 projection,
        # map [-extent, extent] onto the 32x32 texel grid.
        proj = self.node_set.proj[bk.node_idx % cfg.n_nodes].astype(self.dtype)
        uv_m = ops.reshape(
            tape,
            ops.matmul(tape, proj, ops.reshape(tape, p_i, (bk.n_pairs, 3, 1))),
            (bk.n_pairs, 2),
        )
        half = np.float32(cfg.patch_extent)
        scale = np.float32((PATCH_RES - 1) / (2.0 * cfg.patch_extent))
        uv_tex = ops.mul(tape, ops.add(tape, uv_m, half), scale)
        patch_feat = bilinear_sample(tape, state.patches, uv_tex, bk.node_idx)
        feats_in = ops.concat(tape, [pe_p, pe_v, e_pairs, patch_feat], axis=1)
        pair_feats = self._stack_eval(tape, binding, bk, feats_in,
                                      self.params.col_local, "body.col_local")
        fused = bk.blend(tape, pair_feats, w, self.params.col_local.out_dim)
        logits = mlp_forward_nodes(self.params.col_blend, fused, tape,
                                   binding.mlp("body.col_blend", self.params.col_blend))
        rgb_cov = ops.sigmoid(tape, logits)
        base = np.zeros((len(pts), 3), dtype=self.dtype)
        return ops.assign_rows(tape, base, bk.covered, rgb_cov), covered

    def fused_fallback(self, points: np.ndarray, frame_of_point: np.ndarray,
                       fused_state) -> np.ndarray:
        """Per-frame empty-space fallback for fused multi-pose batches."""
        n = self.config.n_nodes
        npv = fused_state.n_posed_value
        out = np.empty(len(points), dtype=self.dtype)
        for f in np.unique(frame_of_point):
            sel = frame_of_point == f
            d2 = ((points[sel][:, None, :] - npv[None, f * n:(f + 1) * n, :]) ** 2).sum(axis=2)
            out[sel] = np.sqrt(d2.min(axis=1)) - self.node_set.influence_radius
        return out

    def fallback_sdf(self, points: np.ndarray, state: PoseConditionedState) -> np.ndarray:
        """Conservative distance outside all influence radii:
        min_i |p - n_i| - influence_radius (safe for empty-space skipping)."""
        n = state.n_posed_value
        out = np.empty(len(points))
        chunk = 4_000_000 // max(len(n), 1)
        for s in range(0, len(points), max(chunk, 1)):
            d2 = ((points[s:s + chunk, None, :] - n[None]) ** 2).sum(axis=2)
            out[s:s + chunk] = np.sqrt(d2.min(axis=1))
        return (out - self.node_set.influence_radius).astype(self.dtype)

    def blend_weight(self, p: np.ndarray, node: int, state: PoseConditionedState) -> float:
        """Single Eq. 4 weight evaluation (diagnostics/tests)."""
        n = state.n_posed_value[node]
        d2 = float(((np.asarray(p, dtype=np.float64) - n) ** 2).sum())
        return max(np.exp(-d2 / (2.0 * self.node_set.sigma ** 2)) - self.node_set.epsilon, 0.0)

    def local_coords(self, p: np.ndarray, node: int, state: PoseConditionedState) -> np.ndarray:
        Tinv = state.T_inv[node]
        q = Tinv[:3, :3] @ np.asarray(p, dtype=np.float64) + Tinv[:3, 3]
        return q - (self.node_set.rest_positions[node] + value_of(state.delta)[node])


def _slice_cols(tape, x, lo, hi):
    xv = value_of(x)
    idx = np.arange(lo, hi)
    out = xv[:, lo:hi]
    if tape is None or not isinstance(x, Node):
        return out

    def bwd(g):
        gx = np.zeros_like(xv)
        gx[:, lo:hi] = g
        ops._accum(x, gx)

    return tape.record(out, bwd)


def _pe_tape(tape, x, m: int):
    """Positional encoding as tape ops (differentiable w.r.t. x)."""
    if not isinstance(x, Node):
        return positional_encoding(value_of(x), m).astype(value_of(x).dtype)
    parts = [x]
    for k in range(m):
        s = ops.mul(tape, x, value_of(x).dtype.type(2.0 ** k))
        parts.append(ops.sin(tape, s))
        parts.append(ops.cos(tape, s))
    return ops.concat(tape, parts, axis=-1)
