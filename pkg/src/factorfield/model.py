"""The factorized radiance field: density factors, appearance factors, decoder."""
from __future__ import annotations

import numpy as np

from .decoders import density_activation, make_decoder, MlpDecoder
from .tensor_field import AppearanceField, FactorField, GridGeometry, resolution_from_budget

FACTOR_GROUP = "factors"
DECODER_GROUP = "decoder"


class RadianceModel:
    """sigma(x) = act(sum_r,m A_sigma(x)); c(x, d) = S(B @ stack(A_c(x)), d).

    ``params()`` is the flat registry of named parameter arrays in a fixed
    order; the arrays are the live storage, so in-place updates take effect.
    """

    def __init__(self, density: FactorField, appearance: AppearanceField, decoder, density_shift=0.0):
        if density.geometry != appearance.geometry:
            raise ValueError("density and appearance fields must share one grid geometry")
        if decoder.n_features != appearance.n_features:
            raise ValueError(f"decoder expects {decoder.n_features} features, "
                             f"appearance basis produces {appearance.n_features}")
        self.density = density
        self.appearance = appearance
        self.decoder = decoder
        self.density_shift = float(density_shift)

    @classmethod
    def create(cls, mode, density_ranks, appearance_ranks, geometry: GridGeometry,
               decoder="mlp", n_features=27, density_shift=0.0, init_std=0.1,
               rng=None, dtype=np.float32):
        rng = np.random.default_rng() if rng is None else rng
        density = FactorField(mode, density_ranks, geometry, rng=rng, init_std=init_std, dtype=dtype)
        appearance = AppearanceField(mode, appearance_ranks, geometry, n_features, rng=rng,
                                     init_std=init_std, dtype=dtype)
        dec = make_decoder(decoder, n_features, rng=rng, dtype=dtype)
        return cls(density, appearance, dec, density_shift)

    @property
    def geometry(self) -> GridGeometry:
        return self.density.geometry

    @property
    def mode(self):
        return self.density.mode

    @property
    def dtype(self):
        return self.density.dtype

    def params(self):
        reg = {}
        for k, v in self.density.arrays.items():
            reg[f"density.{k}"] = v
        for k, v in self.appearance.arrays.items():
            reg[f"appearance.{k}"] = v
        for k, v in self.decoder.params.items():
            reg[f"decoder.{k}"] = v
        return reg

    @staticmethod
    def group_of(name):
        return DECODER_GROUP if name.startswith("decoder.") else FACTOR_GROUP

    def copy(self):
        dec = self.decoder
        if isinstance(dec, MlpDecoder):
            dec = MlpDecoder(dec.n_features, dec.hidden, dec.n_freqs,
                             params={k: v.copy() for k, v in dec.params.items()}, dtype=self.dtype)
        return RadianceModel(self.density.copy(), self.appearance.copy(), dec, self.density_shift)

    def n_factor_parameters(self):
        return self.density.n_parameters() + self.appearance.n_parameters()

    # -- field queries used by the renderer -----------------------------------

    @property
    def bbox(self):
        return self.geometry.lo, self.geometry.hi

    def sigma(self, points):
        raw = self.density.sum_at(self.geometry.to_index(points))
        return density_activation(raw, self.density_shift)

    def rgb(self, points, dirs):
        feats, _ = self.appearance.features(self.geometry.to_index(points))
        return self.decoder(feats, dirs.astype(feats.dtype))

    # -- resolution changes ---------------------------------------------------

    def resampled(self, geometry: GridGeometry):
        return RadianceModel(self.density.resample(geometry), self.appearance.resample(geometry),
                             self.decoder, self.density_shift)

    def upsampled(self, n_voxels):
        g = self.geometry
        res = resolution_from_budget(g.bbox_min, g.bbox_max, n_voxels)
        res = tuple(max(a, b) for a, b in zip(res, g.resolution))
        return self.resampled(g.with_resolution(res))
