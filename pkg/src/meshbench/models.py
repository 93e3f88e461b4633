"""Desk-scale surrogate models built on :mod:`meshbench.adcore`.

``UNetMini`` and ``EncoderHead`` consume NCHW image batches together with a
validity mask; ``MGNMini`` consumes a :class:`~meshbench.transforms.MeshGraph`
(possibly a disjoint union of several graphs).
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import adcore as ad
from .adcore import Parameter, Tensor
from .errors import ShapeError
from .transforms import MeshGraph

LEAKY_SLOPE = 0.01


class Module:
    """Parameter registry by attribute walk, in definition order."""

    def named_parameters(self, prefix="") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def n_params(self, trainable_only=False):
        ps = self.trainable_parameters() if trainable_only else self.parameters()
        return int(sum(p.data.size for p in ps))

    def state_dict(self):
        return {name: p for name, p in self.named_parameters()}

    def load_state_dict(self, arrays):
        own = self.state_dict()
        missing = sorted(set(own) - set(arrays))
        unexpected = sorted(set(arrays) - set(own))
        if missing or unexpected:
            raise ShapeError(f"checkpoint mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in own.items():
            if arrays[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data[...] = arrays[name]

    def astype(self, dtype):
        """Cast every parameter in place (float32 for faster training)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def set_trainable(self, flag, lr_scale=None):
        for p in self.parameters():
            p.trainable = flag
            if lr_scale is not None:
                p.lr_scale = lr_scale

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=None, zero=False):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        shape = (c_out, c_in, k, k)
        self.weight = Parameter(np.zeros(shape) if zero else _he(rng, shape, c_in * k * k))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, zero=False):
        self.weight = Parameter(np.zeros((d_in, d_out)) if zero else _he(rng, (d_in, d_out), d_in))
        self.bias = Parameter(np.zeros(d_out))

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))

    def forward(self, x):
        return ad.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Two linear layers with a LeakyReLU between, optional output LayerNorm."""

    def __init__(self, d_in, d_hidden, d_out, rng, layer_norm=True, zero_last=False):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero=zero_last)
        self.norm = LayerNorm(d_out) if layer_norm else None

    def forward(self, x):
        h = self.fc2(ad.leaky_relu(self.fc1(x), LEAKY_SLOPE))
        return self.norm(h) if self.norm is not None else h


def _masked_input(x, mask, dtype):
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if mask is None:
        return x
    m = np.broadcast_to(np.asarray(mask, dtype=bool)[:, None, :, :], x.shape)
    return ad.mul(x, Tensor(m.astype(x.dtype)))


# --- U-Net ----------------------------------------------------------------------

class ConvBlock(Module):
    def __init__(self, c_in, c_out, rng):
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)

    def forward(self, x):
        x = ad.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        return ad.leaky_relu(self.conv2(x), LEAKY_SLOPE)


class UNetMini(Module):
    """Encoder-decoder with skip connections; strided convs downsample, nearest upsampling restores."""

    def __init__(self, in_channels, out_channels, depth=3, base_channels=16, seed=0):
        rng = np.random.default_rng(seed)
        self.depth = depth
        self.in_channels = in_channels
        self.out_channels = out_channels
        ch = [base_channels * 2 ** i for i in range(depth + 1)]
        self.enc = []
        self.down = []
        c_prev = in_channels
        for lvl in range(depth):
            self.enc.append(ConvBlock(c_prev, ch[lvl], rng))
            self.down.append(Conv2d(ch[lvl], ch[lvl], 3, rng, stride=2, padding=1))
            c_prev = ch[lvl]
        self.bottleneck = ConvBlock(ch[depth - 1], ch[depth], rng)
        self.up = []
        self.dec = []
        for lvl in reversed(range(depth)):
            self.up.append(Conv2d(ch[lvl + 1], ch[lvl], 3, rng))
            self.dec.append(ConvBlock(2 * ch[lvl], ch[lvl], rng))
        self.head = Conv2d(ch[0], out_channels, 1, rng, zero=True)

    def forward(self, x, mask=None):
        x = _masked_input(x, mask, self.dtype)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"UNetMini expects (N, {self.in_channels}, H, W), got {x.shape}")
        div = 2 ** self.depth
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError(f"spatial size {x.shape[2:]} not divisible by 2^depth = {div}")
        skips = []
        for enc, down in zip(self.enc, self.down):
            x = enc(x)
            skips.append(x)
            x = ad.leaky_relu(down(x), LEAKY_SLOPE)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = ad.leaky_relu(up(ad.upsample_nearest(x)), LEAKY_SLOPE)
            x = dec(ad.concat([x, skip], axis=1))
        return self.head(x)


# --- frozen encoder + decoder head ----------------------------------------------

class TransformerBlock(Module):
    def __init__(self, dim, n_heads, rng, mlp_ratio=2):
        self.n_heads = n_heads
        self.norm1 = LayerNorm(dim)
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def attention(self, x):
        b, t, d = x.shape
        h = self.n_heads
        dh = d // h
        qkv = self.qkv(x)                                       # (b, t, 3d)
        qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, h, dh)), (2, 0, 3, 1, 4))
        flat = ad.reshape(qkv, (3, b * h * t * dh))
        q_, k_, v_ = (ad.reshape(ad.gather(flat, [i]), (b * h, t, dh)) for i in range(3))
        scores = ad.scale(ad.matmul(q_, ad.transpose(k_, (0, 2, 1))), 1.0 / math.sqrt(dh))
        out = ad.matmul(ad.softmax(scores, axis=-1), v_)        # (b*h, t, dh)
        out = ad.reshape(ad.transpose(ad.reshape(out, (b, h, t, dh)), (0, 2, 1, 3)), (b, t, d))
        return self.proj(out)

    def forward(self, x):
        x = ad.add(x, self.attention(self.norm1(x)))
        return ad.add(x, self.fc2(ad.leaky_relu(self.fc1(self.norm2(x)), LEAKY_SLOPE)))


class DecoderBlock(Module):
    def __init__(self, c_in, c_out, rng):
        self.conv = Conv2d(c_in, c_out, 3, rng)

    def forward(self, x):
        return ad.leaky_relu(self.conv(ad.upsample_nearest(x)), LEAKY_SLOPE)


class EncoderHead(Module):
    """Patch-transformer encoder with a four-block upsampling decoder.

    The encoder is randomly initialised. Only the last ``trainable_last``
    transformer blocks receive gradients, and those learn with
    ``encoder_lr_scale`` times the base rate. The decoder's four x2
    upsamples require ``patch_size == 16``; a 1x1 projection follows them.
    """

    N_DECODER_BLOCKS = 4

    def __init__(self, in_channels, out_channels, image_size, patch_size=16, embed_dim=64,
                 n_blocks=4, n_heads=4, trainable_last=2, encoder_lr_scale=0.01,
                 decoder_channels=(64, 32, 16, 16), seed=0):
        scale = 2 ** self.N_DECODER_BLOCKS
        if patch_size != scale:
            raise ShapeError(f"patch_size must be {scale} so four x2 upsamples restore the input size")
        if image_size % patch_size:
            raise ShapeError(f"image size {image_size} is not a multiple of patch size {patch_size}")
        if not 0 <= trainable_last <= n_blocks:
            raise ValueError(f"trainable_last must lie in [0, {n_blocks}], got {trainable_last}")
        if embed_dim % n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        rng = np.random.default_rng(seed)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.trainable_last = trainable_last
        self.grid = image_size // patch_size
        self.patch_embed = Conv2d(in_channels, embed_dim, patch_size, rng, stride=patch_size, padding=0)
        self.pos_embed = Parameter(0.02 * rng.standard_normal((self.grid * self.grid, embed_dim)))
        self.blocks = [TransformerBlock(embed_dim, n_heads, rng) for _ in range(n_blocks)]
        chans = [embed_dim, *decoder_channels]
        self.decoder = [DecoderBlock(chans[i], chans[i + 1], rng) for i in range(self.N_DECODER_BLOCKS)]
        self.head = Conv2d(chans[-1], out_channels, 1, rng, zero=True)

        self.patch_embed.set_trainable(False)
        self.pos_embed.trainable = False
        n_frozen = n_blocks - trainable_last
        for i, blk in enumerate(self.blocks):
            if i < n_frozen:
                blk.set_trainable(False)
            else:
                blk.set_trainable(True, lr_scale=encoder_lr_scale)

    def encoder_parameters(self):
        ps = self.patch_embed.parameters() + [self.pos_embed]
        for blk in self.blocks:
            ps += blk.parameters()
        return ps

    def decoder_parameters(self):
        ps = []
        for blk in self.decoder:
            ps += blk.parameters()
        return ps + self.head.parameters()

    def forward(self, x, mask=None):
        x = _masked_input(x, mask, self.dtype)
        n, c, h, w = x.shape
        if c != self.in_channels or h != self.image_size or w != self.image_size:
            raise ShapeError(f"EncoderHead expects (N, {self.in_channels}, {self.image_size}, "
                             f"{self.image_size}), got {x.shape}")
        t = self.patch_embed(x)                                  # (n, d, g, g)
        g = self.grid
        t = ad.transpose(ad.reshape(t, (n, self.embed_dim, g * g)), (0, 2, 1))
        t = ad.add(t, self.pos_embed)
        for blk in self.blocks:
            t = blk(t)
        y = ad.reshape(ad.transpose(t, (0, 2, 1)), (n, self.embed_dim, g, g))
        for blk in self.decoder:
            y = blk(y)
        return self.head(y)


# --- MeshGraphNet-style message passing ----------------------------------------------

class EdgeUpdate(Module):
    """Edge MLP over ``[edge, src, dst]``; the first layer is split per operand."""

    def __init__(self, latent, rng):
        self.w_edge = Parameter(_he(rng, (latent, latent), 3 * latent))
        self.w_src = Parameter(_he(rng, (latent, latent), 3 * latent))
        self.w_dst = Parameter(_he(rng, (latent, latent), 3 * latent))
        self.b1 = Parameter(np.zeros(latent))
        self.fc2 = Linear(latent, latent, rng)
        self.norm = LayerNorm(latent)

    def forward(self, e, h, src, dst):
        # concat([e, h[src], h[dst]]) @ W == e @ We + (h @ Ws)[src] + (h @ Wd)[dst]
        z = ad.add(ad.matmul(e, self.w_edge), ad.gather(ad.matmul(h, self.w_src), src))
        z = ad.add(ad.add(z, ad.gather(ad.matmul(h, self.w_dst), dst)), self.b1)
        return self.norm(self.fc2(ad.leaky_relu(z, LEAKY_SLOPE)))


class MGNMini(Module):
    """Encode-process-decode message passing with residual latent updates."""

    def __init__(self, node_in, out_channels, edge_in=3, latent=64, n_mp=8, seed=0):
        rng = np.random.default_rng(seed)
        self.node_in = node_in
        self.edge_in = edge_in
        self.out_channels = out_channels
        self.n_mp = n_mp
        self.node_encoder = MLP(node_in, latent, latent, rng)
        self.edge_encoder = MLP(edge_in, latent, latent, rng)
        self.edge_updates = [EdgeUpdate(latent, rng) for _ in range(n_mp)]
        self.node_updates = [MLP(2 * latent, latent, latent, rng) for _ in range(n_mp)]
        self.decoder = MLP(latent, latent, out_channels, rng, layer_norm=False, zero_last=True)

    def forward(self, graph: MeshGraph):
        if graph.node_feat.shape[1] != self.node_in or graph.edge_feat.shape[1] != self.edge_in:
            raise ShapeError(f"MGNMini expects {self.node_in} node / {self.edge_in} edge features, got "
                             f"{graph.node_feat.shape[1]} / {graph.edge_feat.shape[1]}")
        src, dst = graph.edges[:, 0], graph.edges[:, 1]
        n = graph.n_nodes
        h = self.node_encoder(Tensor(graph.node_feat, dtype=self.dtype))
        e = self.edge_encoder(Tensor(graph.edge_feat, dtype=self.dtype))
        for eu, nu in zip(self.edge_updates, self.node_updates):
            e = ad.add(e, eu(e, h, src, dst))
            agg = ad.scatter_sum(e, dst, n)
            h = ad.add(h, nu(ad.concat([h, agg], axis=-1)))
        return self.decoder(h)


def param_report(models: dict) -> str:
    """One-line ``n_param`` row in the layout of the results table."""
    cells = [f"{name}: {m.n_params(trainable_only=True):,} trainable / {m.n_params():,} total"
             for name, m in models.items()]
    return "n_param | " + " | ".join(cells)
