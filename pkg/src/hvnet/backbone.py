"""Convolutional main stream with multi-scale injection and the fusion pyramid.

Block ``i`` (1-based) runs at resolution ``R / 2**(i-1)``; its first conv has
stride 2 for ``i > 1`` and pseudo-image ``i`` is concatenated right after
that first conv. The fusion pyramid upsamples block ``i+1`` with a deconv,
concatenates it onto block ``i``, applies a 3x3 conv, brings every branch back
to full resolution and concatenates the branches into ``B_f``. Each class then
gets its own strided conv chain on ``B_f``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_tensor import ConvLayer, DimensionError, init_conv


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (64, 128, 256)
    convs_per_block: int = 3
    ffpn_width: int = 128
    class_strides: tuple[int, ...] = (1, 2, 2)  # Pedestrian, Cyclist, Car
    pyramid_channels: int = 128
    pyramid_convs: int = 2

    @property
    def n_blocks(self) -> int:
        return len(self.channels)

    @property
    def n_classes(self) -> int:
        return len(self.class_strides)


class Backbone:
    """Layer wiring for a given config; parameters live in a flat store."""

    def __init__(self, cfg: BackboneConfig, n_h: int, n_images: int):
        self.cfg = cfg
        self.n_h = n_h
        self.n_images = n_images
        self.specs: dict[str, tuple] = {}  # layer name -> (c_in, c_out, k)
        self.blocks: list[list[ConvLayer]] = []
        c_prev = n_h
        for i, c in enumerate(cfg.channels):
            layers = []
            for j in range(cfg.convs_per_block):
                name = f"backbone.block{i + 1}.conv{j + 1}"
                c_in = c_prev if j == 0 else c
                if j == 1 and 0 < i < n_images:
                    c_in += n_h
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(self._conv(name, c_in, c, 3, stride, 1))
            self.blocks.append(layers)
            c_prev = c
        nb, fw = cfg.n_blocks, cfg.ffpn_width
        self.gammas: dict[int, ConvLayer] = {}
        self.psis: dict[int, list[ConvLayer]] = {}
        for i in range(nb):
            c_in = cfg.channels[i]
            if i + 1 < nb:
                self.gammas[i] = self._conv(f"ffpn.gamma{i + 2}", cfg.channels[i + 1], fw, 2, 2, 0, transposed=True)
                c_in += fw
            chain = [self._conv(f"ffpn.psi{i + 1}.conv", c_in, fw, 3, 1, 1)]
            if i > 0:
                f = 2 ** i
                chain.append(self._conv(f"ffpn.psi{i + 1}.up", fw, fw, f, f, 0, transposed=True))
            self.psis[i] = chain
        self.pyramids: list[list[ConvLayer]] = []
        for k, stride in enumerate(cfg.class_strides):
            chain = []
            for j in range(cfg.pyramid_convs):
                c_in = nb * fw if j == 0 else cfg.pyramid_channels
                chain.append(self._conv(f"pyramid{k}.conv{j + 1}", c_in, cfg.pyramid_channels, 3,
                                        stride if j == 0 else 1, 1))
            self.pyramids.append(chain)

    def _conv(self, name, c_in, c_out, k, stride, pad, transposed=False) -> ConvLayer:
        self.specs[name] = (c_in, c_out, k, transposed)
        return ConvLayer(name, stride, pad, activated=True, transposed=transposed)

    def init_params(self, rng: np.random.Generator) -> dict:
        store = {}
        for name, (c_in, c_out, k, transposed) in self.specs.items():
            p = init_conv(rng, c_in, c_out, k)
            if transposed:
                # fan-in of a transposed conv is c_in * (k / stride)**2 = c_in here
                p.weight *= k
            store[name + ".weight"] = p.weight
            store[name + ".bias"] = p.bias
        return store

    # -- main stream ------------------------------------------------------

    def main_stream(self, store: dict, images: list[np.ndarray]):
        if len(images) != self.n_images:
            raise DimensionError(f"expected {self.n_images} pseudo-images, got {len(images)}")
        outs, caches = [], []
        x = images[0]
        for i, layers in enumerate(self.blocks):
            block_cache = []
            for j, layer in enumerate(layers):
                if j == 1 and 0 < i < len(images):
                    img = images[i]
                    if img.shape[1:] != x.shape[1:]:
                        raise DimensionError(
                            f"block {i + 1}: pseudo-image {img.shape[1:]} does not match "
                            f"feature map {x.shape[1:]}")
                    x = np.concatenate([x, img], axis=0)
                x, c = layer.forward(store, x)
                block_cache.append(c)
            outs.append(x)
            caches.append(block_cache)
        return outs, caches

    def main_stream_backward(self, store: dict, d_outs: list[np.ndarray], caches, grads: dict):
        d_images = [None] * self.n_images
        d_x = None
        for i in reversed(range(len(self.blocks))):
            d = d_outs[i] if d_x is None else d_x + d_outs[i]
            for j in reversed(range(len(self.blocks[i]))):
                d = self.blocks[i][j].backward(store, d, caches[i][j], grads)
                if j == 1 and 0 < i < self.n_images:
                    c = self.cfg.channels[i]
                    d_images[i] = d[c:]
                    d = d[:c]
            d_x = d
        d_images[0] = d_x
        return d_images

    # -- fusion pyramid ----------------------------------------------------

    def ffpn_fuse(self, store: dict, blocks: list[np.ndarray]):
        nb = self.cfg.n_blocks
        branches, caches = [], []
        for i in range(nb):
            x = blocks[i]
            gcache = None
            if i + 1 < nb:
                up, gcache = self.gammas[i].forward(store, blocks[i + 1])
                if up.shape[1:] != x.shape[1:]:
                    raise DimensionError(f"ffpn: upsampled {up.shape[1:]} vs {x.shape[1:]}")
                x = np.concatenate([x, up], axis=0)
            pcache = []
            for layer in self.psis[i]:
                x, c = layer.forward(store, x)
                pcache.append(c)
            branches.append(x)
            caches.append((gcache, pcache))
        shapes = {b.shape[1:] for b in branches}
        if len(shapes) != 1:
            raise DimensionError(f"ffpn branches misaligned: {sorted(shapes)}")
        return np.concatenate(branches, axis=0), caches

    def ffpn_backward(self, store: dict, d_bf: np.ndarray, caches, grads: dict):
        nb, fw = self.cfg.n_blocks, self.cfg.ffpn_width
        d_blocks = [None] * nb
        for i in reversed(range(nb)):
            gcache, pcache = caches[i]
            d = d_bf[i * fw:(i + 1) * fw]
            for layer, c in zip(reversed(self.psis[i]), reversed(pcache)):
                d = layer.backward(store, d, c, grads)
            if i + 1 < nb:
                ci = self.cfg.channels[i]
                d_up = d[ci:]
                d = d[:ci]
                d_next = self.gammas[i].backward(store, d_up, gcache, grads)
                d_blocks[i + 1] = d_next if d_blocks[i + 1] is None else d_blocks[i + 1] + d_next
            d_blocks[i] = d if d_blocks[i] is None else d_blocks[i] + d
        return d_blocks

    # -- class pyramids ------------------------------------------------------

    def class_pyramids(self, store: dict, bf: np.ndarray):
        outs, caches = [], []
        for chain in self.pyramids:
            x, cc = bf, []
            for layer in chain:
                x, c = layer.forward(store, x)
                cc.append(c)
            outs.append(x)
            caches.append(cc)
        return outs, caches

    def class_pyramids_backward(self, store: dict, d_outs, caches, grads: dict):
        d_bf = None
        for chain, cc, d in zip(self.pyramids, caches, d_outs):
            for layer, c in zip(reversed(chain), reversed(cc)):
                d = layer.backward(store, d, c, grads)
            d_bf = d if d_bf is None else d_bf + d
        return d_bf

    # -- whole backbone ------------------------------------------------------

    def forward(self, store: dict, images: list[np.ndarray]):
        blocks, c1 = self.main_stream(store, images)
        bf, c2 = self.ffpn_fuse(store, blocks)
        outs, c3 = self.class_pyramids(store, bf)
        return outs, (c1, c2, c3)

    def backward(self, store: dict, d_outs, cache, grads: dict):
        c1, c2, c3 = cache
        d_bf = self.class_pyramids_backward(store, d_outs, c3, grads)
        d_blocks = self.ffpn_backward(store, d_bf, c2, grads)
        return self.main_stream_backward(store, d_blocks, c1, grads)
