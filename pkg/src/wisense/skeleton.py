"""Feature-matrix encoder feeding a linear pose predictor."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from . import kernels
from .channel import Scene, ground_truth_paths, noise_var_for_snr, synthesize_csi
from .smsp import FeatureMatrix, SmspConfig, perceive

N_KEYPOINTS = 18
OUT_SIZE = 144
N_ROWS = 150
EDGE_ROWS = 12
N_SUBCARRIERS = 256
N_ANTENNAS = 3
N_TIME = 3

# standing figure in a unit box, (x, y) with y growing downward as in image coordinates
POSE_TEMPLATE = np.array([
    [0.50, 0.08], [0.50, 0.20], [0.38, 0.20], [0.33, 0.36], [0.30, 0.50],
    [0.62, 0.20], [0.67, 0.36], [0.70, 0.50], [0.43, 0.52], [0.42, 0.72],
    [0.41, 0.92], [0.57, 0.52], [0.58, 0.72], [0.59, 0.92], [0.47, 0.06],
    [0.53, 0.06], [0.44, 0.08], [0.56, 0.08],
])


class UntrainedModelError(RuntimeError):
    pass


def downsample_index() -> np.ndarray:
    """Rows of the stacked 512-row [phase; amplitude] matrix kept by the encoder.

    Each 256-row block loses 12 guard rows per edge; 75 of the remaining 232
    are picked at evenly spaced positions.
    """
    per_block = N_ROWS // 2
    inner = N_SUBCARRIERS - 2 * EDGE_ROWS
    pick = EDGE_ROWS + np.round(np.linspace(0, inner - 1, per_block)).astype(int)
    return np.concatenate([pick, pick + N_SUBCARRIERS])


def bilinear_point(h11, h12, h21, h22, r1, c1, r, c):
    """Bilinear value at (r, c) inside the unit cell whose top-left node is (r1, c1)."""
    r2, c2 = r1 + 1, c1 + 1
    return ((h11 * (r2 - r) * (c2 - c) + h21 * (r - r1) * (c2 - c))
            + (h12 * (r2 - r) * (c - c1) + h22 * (r - r1) * (c - c1)))


def encode_features(samples: Sequence[FeatureMatrix]) -> np.ndarray:
    """Encode three time samples into a (150, 144, 144) tensor.

    Axis 1 of the intermediate (150, 3, 3) stack is time, axis 2 is antenna.
    """
    if len(samples) != N_TIME:
        raise ValueError(f"need exactly {N_TIME} feature matrices, got {len(samples)}")
    idx = downsample_index()
    cols = []
    for fm in samples:
        for h in (fm.h_ph, fm.h_am):
            if np.shape(h) != (N_ANTENNAS, N_SUBCARRIERS):
                raise ValueError(f"feature map must be {N_ANTENNAS}x{N_SUBCARRIERS}, got {np.shape(h)}")
        stacked = np.vstack([np.asarray(fm.h_ph, float).T, np.asarray(fm.h_am, float).T])
        cols.append(stacked[idx])
    small = np.stack(cols, axis=1)
    out = kernels.bilinear_upsample(small, OUT_SIZE, OUT_SIZE)
    if not np.all(np.isfinite(out)):
        raise ValueError("encoded tensor has non-finite entries")
    return out


def pool(x: np.ndarray) -> np.ndarray:
    """Per-row mean of an encoded tensor (or a batch of them)."""
    return np.asarray(x, float).mean(axis=(-2, -1))


@dataclass
class PredictorModel:
    kind: str = "linear_baseline"
    in_dim: int = N_ROWS
    out_shape: tuple[int, int, int] = (2, N_KEYPOINTS, N_KEYPOINTS)
    params: np.ndarray | None = None
    epochs: int = 0
    loss_curve: list[float] = field(default_factory=list)
    ridge: float = 0.0

    @property
    def out_dim(self) -> int:
        return int(np.prod(self.out_shape))

    @property
    def n_params(self) -> int:
        return (self.in_dim + 1) * self.out_dim

    def __post_init__(self):
        if self.kind != "linear_baseline":
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if self.params is not None:
            self.params = np.asarray(self.params, float).ravel()
            if self.params.size != self.n_params:
                raise ValueError(f"expected {self.n_params} parameters, got {self.params.size}")

    @classmethod
    def zero(cls, bias=None) -> "PredictorModel":
        m = cls()
        p = np.zeros(m.n_params)
        if bias is not None:
            p[-m.out_dim:] = np.broadcast_to(np.asarray(bias, float).ravel(), (m.out_dim,))
        m.params = p
        return m

    def _split(self):
        if self.params is None:
            raise UntrainedModelError("model has no parameters; fit it first")
        W = self.params[:-self.out_dim].reshape(self.in_dim, self.out_dim)
        return W, self.params[-self.out_dim:]

    @property
    def weight_matrix(self) -> np.ndarray:
        return self._split()[0]

    def raw(self, features: np.ndarray) -> np.ndarray:
        W, b = self._split()
        return features @ W + b

    def to_json(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim, "out_shape": list(self.out_shape),
                "epochs": self.epochs, "loss_curve": self.loss_curve, "ridge": self.ridge}

    def save(self, stem: str | Path) -> None:
        stem = Path(stem)
        stem.with_suffix(".json").write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        self._split()
        np.save(stem.with_suffix(".npy"), self.params)

    @classmethod
    def load(cls, stem: str | Path) -> "PredictorModel":
        stem = Path(stem)
        meta = json.loads(stem.with_suffix(".json").read_text())
        meta["out_shape"] = tuple(meta["out_shape"])
        return cls(params=np.load(stem.with_suffix(".npy")), **meta)


def fit_baseline(inputs: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                 ridge: float = 1e-8, pooled: bool = False) -> PredictorModel:
    """Ridge regression from pooled tensors to flattened adjacency targets.

    ``ridge`` is relative to the mean feature variance. The bias is not
    penalized. Pass ``pooled=True`` when ``inputs`` are already 150-vectors.
    """
    if len(inputs) == 0 or len(inputs) != len(targets):
        raise ValueError("need a non-empty dataset with one target per input")
    X = np.array([np.asarray(x, float) if pooled else pool(x) for x in inputs])
    Y = np.array([np.asarray(t, float).ravel() for t in targets])
    model = PredictorModel(in_dim=X.shape[1], ridge=ridge)
    if Y.shape[1] != model.out_dim:
        raise ValueError(f"targets must have {model.out_dim} entries")
    xm, ym = X.mean(0), Y.mean(0)
    Xc, Yc = X - xm, Y - ym
    scale = float(np.mean(np.sum(Xc ** 2, axis=0))) or 1.0
    lam = ridge * scale
    A = np.vstack([Xc, np.sqrt(lam) * np.eye(X.shape[1])]) if lam > 0 else Xc
    B = np.vstack([Yc, np.zeros((X.shape[1], Y.shape[1]))]) if lam > 0 else Yc
    W = linalg.lstsq(A, B, lapack_driver="gelsd")[0]
    b = ym - xm @ W
    model.params = np.concatenate([W.ravel(), b])
    model.epochs = 1
    pred = X @ W + b
    model.loss_curve = [float(np.mean(np.sum((pred - Y) ** 2, axis=1)))]
    return model


def predict(model: PredictorModel, x: np.ndarray, pooled: bool = False) -> np.ndarray:
    feats = np.asarray(x, float) if pooled else pool(x)
    return np.clip(model.raw(feats), 0.0, 1.0).reshape(model.out_shape)


def mse_loss(v_p: np.ndarray, v_ref: np.ndarray) -> float:
    """Squared L2 norm of the difference (summed, not averaged)."""
    v_p, v_ref = np.asarray(v_p, float), np.asarray(v_ref, float)
    if v_p.shape != v_ref.shape:
        raise ValueError(f"shape mismatch {v_p.shape} vs {v_ref.shape}")
    return float(np.sum((v_p - v_ref) ** 2))


def pair_skeleton(v: np.ndarray) -> np.ndarray:
    """(18, 2) keypoints read off the diagonals; channel 0 is X, channel 1 is Y."""
    v = np.asarray(v, float)
    if v.shape != (2, N_KEYPOINTS, N_KEYPOINTS):
        raise ValueError(f"adjacency must be 2x18x18, got {v.shape}")
    d = np.arange(N_KEYPOINTS)
    return np.stack([v[0, d, d], v[1, d, d]], axis=1)


def embed_skeleton(points: np.ndarray) -> np.ndarray:
    """Adjacency tensor for 18 points in [0, 1]^2.

    Diagonals carry the coordinates; entry (i, j) off the diagonal carries the
    pairwise offset (p_i - p_j + 1) / 2, which also stays in [0, 1].
    """
    p = np.asarray(points, float)
    if p.shape != (N_KEYPOINTS, 2):
        raise ValueError(f"need 18x2 points, got {p.shape}")
    v = np.empty((2, N_KEYPOINTS, N_KEYPOINTS))
    for ch in range(2):
        v[ch] = (p[:, ch][:, None] - p[:, ch][None, :] + 1) / 2
        np.fill_diagonal(v[ch], p[:, ch])
    return v


def template_pose(user_pos, bounds) -> np.ndarray:
    """Template figure placed at the user's normalized position inside ``bounds``.

    ``bounds`` is ((xmin, ymin), (xmax, ymax)) in meters.
    """
    (x0, y0), (x1, y1) = bounds
    cx = (user_pos[0] - x0) / (x1 - x0)
    cy = 1.0 - (user_pos[1] - y0) / (y1 - y0)
    pts = (POSE_TEMPLATE - 0.5) * 0.3 + np.array([cx, cy])
    return np.clip(pts, 0.0, 1.0)


def synthetic_dataset(scene: Scene, positions, snr_db: float = 20.0, seed: int = 0,
                      config: SmspConfig = SmspConfig()):
    """Encoded tensors and template targets for the user placed at each position.

    Three consecutive frames of each perception run feed the encoder.
    """
    from dataclasses import replace

    pts = np.array([scene.tx_pos] + [r.pos for r in scene.rx] + list(positions), float)
    bounds = (tuple(pts.min(0) - 1.0), tuple(pts.max(0) + 1.0))
    children = np.random.SeedSequence(seed).spawn(len(positions))
    xs, ys = [], []
    for pos, ss in zip(positions, children):
        sc = replace(scene, user_pos=tuple(map(float, pos)))
        s_paths, s_csi = (int(v) for v in ss.generate_state(2))
        paths = ground_truth_paths(sc, s_paths)
        nv = {q: noise_var_for_snr(sc, p, snr_db) for q, p in paths.items()}
        streams = synthesize_csi(sc, paths, nv, U=max(N_TIME, 3), seed=s_csi)
        res = perceive(streams, sc, config)
        xs.append(encode_features(res.features[:N_TIME]))
        ys.append(embed_skeleton(template_pose(pos, bounds)))
    return xs, ys
