"""Terminal-outcome dynamics model over (observation, action chunk).

The trunk reads the observation features and a chunk in normalized units,
possibly noised. Two heads share it: a latent head regressing the terminal
observation and a 4-way color classifier.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .blockworld import N_COLORS, OBS_DIM
from .diffusion import (FEATURE_DIM, NoiseSchedule, _trajectories, chunk_windows, encode_chunks, forward_noise,
                        policy_features)
from .numerics import AdamState, MlpParams, Rng, Tape, Tensor, adam_step, backward, mlp_forward
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .validation import check_chunks, check_fitted, check_obs

log = logging.getLogger(__name__)

HEADS = ("latent", "classifier")
LATENT_DIM = OBS_DIM


@dataclass(frozen=True)
class NoiseAugment:
    """Which noise level each training chunk is shown at.

    With probability ``p_clean`` the chunk stays clean (level 0); otherwise
    the level is geometric on {1, 2, ...} with mean ``mean_step``, clamped
    to the schedule's K.
    """

    p_clean: float = 0.5
    mean_step: float = 20.0

    def __post_init__(self):
        if not 0.0 <= self.p_clean <= 1.0:
            raise ValueError(f"p_clean must lie in [0, 1], got {self.p_clean}")
        if self.mean_step < 1.0:
            raise ValueError(f"mean_step must be >= 1, got {self.mean_step}")

    def raw_steps(self, rng: Rng, n: int) -> np.ndarray:
        return rng.geometric(1.0 / self.mean_step, n)

    def sample(self, rng: Rng, n: int, K: int) -> np.ndarray:
        steps = np.minimum(self.raw_steps(rng, n), K)
        clean = rng.uniform(size=(n,)) < self.p_clean
        return np.where(clean, 0, steps).astype(np.int64)


def noise_chunks(a0: np.ndarray, steps: np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noise each row of ``a0`` to its own level; level 0 rows stay clean."""
    out = a0.copy()
    noisy = steps > 0
    if noisy.any():
        out[noisy] = forward_noise(a0[noisy], steps[noisy], eps[noisy], sched)
    return out


class DynamicsModel(BaseEstimator):
    """Predicts where an episode ends up from its current observation and chunk.

    Parameters
    ----------
    hidden : tuple of int
        Trunk widths; every trunk layer is tanh-activated.
    heads : tuple of str
        Subset of ("latent", "classifier") to train.
    schedule : NoiseSchedule, optional
        Must be the policy's schedule so augmentation matches inference.
    p_clean, mean_step : noise augmentation (``p_clean=1`` disables it).
    chunk_len : int
    epochs, batch_size, lr : training budget.
    random_state : int
    """

    def __init__(self, hidden=(128, 128, 128), heads=HEADS, schedule: NoiseSchedule | None = None,
                 p_clean: float = 0.5, mean_step: float = 20.0, chunk_len: int = 16, chunk_mode: str = "waypoints",
                 epochs: int = 20, batch_size: int = 128, lr: float = 1e-3, class_weight: float = 1.0, random_state: int = 0,
                 verbose: int = 0):
        self.hidden = hidden
        self.heads = heads
        self.schedule = schedule
        self.p_clean = p_clean
        self.mean_step = mean_step
        self.chunk_len = chunk_len
        self.chunk_mode = chunk_mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.class_weight = class_weight
        self.random_state = random_state
        self.verbose = verbose

    @property
    def input_dim(self) -> int:
        return FEATURE_DIM + 2 * self.chunk_len

    def _check_heads(self) -> tuple[str, ...]:
        heads = tuple(self.heads)
        bad = [h for h in heads if h not in HEADS]
        if bad or not heads:
            raise ValueError(f"heads must be a non-empty subset of {HEADS}, got {heads}")
        return heads

    def _forward(self, params: dict, obs: np.ndarray, chunk: Tensor, tape: Tape, head: str) -> Tensor:
        b = obs.shape[0]
        flat = tape.reshape(chunk, (b, 2 * self.chunk_len))
        x = tape.concat([Tensor(policy_features(obs)), flat], axis=1)
        h = mlp_forward(params["trunk"], x, tape, activate_last=True)
        return mlp_forward(params[head], h, tape)

    def fit(self, X, y=None):
        heads = self._check_heads()
        aug = NoiseAugment(self.p_clean, self.mean_step)
        data = chunk_windows(_trajectories(X), self.chunk_len)
        if np.any(data["labels"] < 0):
            raise ValueError("dynamics training needs labeled trajectories (every demo must touch a square)")
        sched = self.schedule if self.schedule is not None else NoiseSchedule()
        rng = Rng(self.random_state)
        params = {"trunk": MlpParams.init([self.input_dim, *self.hidden], rng)}
        if "latent" in heads:
            params["latent"] = MlpParams.init([self.hidden[-1], LATENT_DIM], rng)
        if "classifier" in heads:
            params["classifier"] = MlpParams.init([self.hidden[-1], N_COLORS], rng)
        names = list(params)
        flat = [t for n in names for t in params[n].tensors()]
        state = AdamState.zeros_like([t.data for t in flat])

        obs = data["obs"]
        a0 = encode_chunks(data["chunks"], self.chunk_mode)
        goals = data["goals"]
        onehot = np.eye(N_COLORS)[data["labels"]]
        n = len(obs)
        losses = []
        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            total = 0.0
            for start in range(0, n, self.batch_size):
                idx = perm[start:start + self.batch_size]
                b = len(idx)
                steps = aug.sample(rng, b, sched.K)
                eps = rng.gaussian((b, self.chunk_len, 2))
                chunk = noise_chunks(a0[idx], steps, eps, sched)
                tape = Tape()
                x = tape.concat([Tensor(policy_features(obs[idx])), Tensor(chunk.reshape(b, -1))], axis=1)
                h = mlp_forward(params["trunk"], x, tape, activate_last=True)
                terms = []
                if "latent" in params:
                    z = mlp_forward(params["latent"], h, tape)
                    terms.append(tape.scale(tape.sum(tape.square(tape.sub(z, goals[idx]))), 1.0 / b))
                if "classifier" in params:
                    logp = tape.log_softmax(mlp_forward(params["classifier"], h, tape), axis=1)
                    terms.append(tape.scale(tape.sum(tape.mul(logp, onehot[idx])), -self.class_weight / b))
                loss = terms[0] if len(terms) == 1 else tape.add(terms[0], terms[1])
                grads = backward(tape, 1.0, loss)
                flat = [t for nm in names for t in params[nm].tensors()]
                new, state = adam_step([t.data for t in flat], [grads[t] for t in flat], state, self.lr)
                pos = 0
                for nm in names:
                    k = 2 * len(params[nm].layers)
                    params[nm] = params[nm].with_arrays(new[pos:pos + k])
                    pos += k
                total += float(loss.data) * b
            losses.append(total / n)
            if self.verbose:
                log.info("dynamics epoch %d loss %.5f", epoch + 1, losses[-1])
        self.params_ = params
        self.schedule_ = sched
        self.loss_curve_ = losses
        return self

    # inference ------------------------------------------------------------

    def _head_output(self, head: str, obs, chunk, tape: Tape | None):
        check_fitted(self, "params_")
        if head not in self.params_:
            raise ValueError(f"head {head!r} was not trained (heads={tuple(self.params_)[1:]})")
        obs = check_obs(obs)
        if isinstance(chunk, Tensor):
            if not np.all(np.isfinite(chunk.data)):
                raise ValueError("action chunks contain non-finite values")
            if chunk.shape != (obs.shape[0], self.chunk_len, 2):
                raise ValueError(f"action chunks must have shape {(obs.shape[0], self.chunk_len, 2)}, got {chunk.shape}")
        else:
            chunk = Tensor(check_chunks(chunk, self.chunk_len, obs.shape[0]))
        own = tape is None
        tape = tape if tape is not None else Tape()
        out = self._forward(self.params_, obs, chunk, tape, head)
        return out.data if own else out

    def predict_outcome(self, obs, chunk, tape: Tape | None = None):
        """Predicted terminal latent for normalized chunks, shape (B, 26).

        With a tape the result is a recorded :class:`Tensor`; otherwise an array.
        """
        return self._head_output("latent", obs, chunk, tape)

    def predict_logits(self, obs, chunk, tape: Tape | None = None):
        """Color logits, shape (B, 4)."""
        return self._head_output("classifier", obs, chunk, tape)

    def transform(self, X):
        """Latent outcome for ``X = (obs, normalized chunks)``."""
        obs, chunk = X
        return self.predict_outcome(obs, chunk)

    def predict(self, X):
        """Most likely touched color for ``X = (obs, normalized chunks)``."""
        obs, chunk = X
        return np.argmax(self.predict_logits(obs, chunk), axis=1)

    def latent_loss(self, X, shuffle: bool = False, rng: Rng | None = None, noise_step: int = 0) -> float:
        """Mean squared terminal-latent error on clean windows of ``X``.

        ``shuffle`` permutes chunks across windows, which breaks the pairing
        between each observation and its own actions.
        """
        data = chunk_windows(_trajectories(X), self.chunk_len)
        rng = rng or Rng(self.random_state + 7)
        a0 = encode_chunks(data["chunks"], self.chunk_mode)
        if noise_step:
            a0 = forward_noise(a0, noise_step, rng.gaussian(a0.shape), self.schedule_)
        if shuffle:
            a0 = a0[rng.permutation(len(a0))]
        z = self.predict_outcome(data["obs"], a0)
        return float(np.mean(np.sum((z - data["goals"]) ** 2, axis=1)))

    def accuracy(self, X, noise_step: int = 0, rng: Rng | None = None) -> float:
        data = chunk_windows(_trajectories(X), self.chunk_len)
        rng = rng or Rng(self.random_state + 11)
        a0 = encode_chunks(data["chunks"], self.chunk_mode)
        if noise_step:
            a0 = forward_noise(a0, noise_step, rng.gaussian(a0.shape), self.schedule_)
        return float(np.mean(self.predict((data["obs"], a0)) == data["labels"]))

    def score(self, X, y=None) -> float:
        return -self.latent_loss(X) if "latent" in self.params_ else self.accuracy(X)

    # persistence ----------------------------------------------------------

    def save(self, path):
        check_fitted(self, "params_")
        names = list(self.params_)
        layers = [layer for nm in names for layer in self.params_[nm].arrays()]
        meta = {
            "role": "dynamics",
            "hidden": list(self.hidden),
            "heads": names[1:],
            "chunk_len": self.chunk_len,
            "chunk_mode": self.chunk_mode,
            "p_clean": self.p_clean,
            "mean_step": self.mean_step,
            "epochs": self.epochs,
            "schedule": self.schedule_.config(),
            "loss_curve": self.loss_curve_,
        }
        return save_checkpoint(path, layers, meta)

    @classmethod
    def load(cls, path, schedule: NoiseSchedule | None = None) -> "DynamicsModel":
        layers, meta = load_checkpoint(path)
        if meta.get("role") != "dynamics":
            raise ValueError(f"{path}: checkpoint role {meta.get('role')!r} is not dynamics")
        sc = meta["schedule"]
        sched = schedule or NoiseSchedule(sc["K"], *sc["beta_range"], sc["ddim_steps"])
        model = cls(hidden=tuple(meta["hidden"]), heads=tuple(meta["heads"]), schedule=sched,
                    p_clean=meta["p_clean"], mean_step=meta["mean_step"], chunk_len=meta["chunk_len"],
                    chunk_mode=meta.get("chunk_mode", "waypoints"), epochs=meta["epochs"])
        depth = len(meta["hidden"])
        params = {"trunk": MlpParams.from_arrays(layers[:depth])}
        for i, head in enumerate(meta["heads"]):
            params[head] = MlpParams.from_arrays([layers[depth + i]])
        model.params_ = params
        model.schedule_ = sched
        model.loss_curve_ = meta.get("loss_curve", [])
        return model
