"""Trajectories, transition tuples, file I/O and trajectory-level k-fold splits.

A dataset holds ``n`` trajectories of identical length.  Trajectory ``i`` has
steps ``t = 0..T`` with observation ``O_t``, reward proxy ``W_t``, action
``A_t`` and reward ``R_t``, plus a terminal half-step ``(O_{T+1}, W_{T+1})``
that carries no action or reward.

Arrays are stored stacked:

==========  ====================
``obs``     ``(n, T + 2, d_obs)``
``proxy``   ``(n, T + 2, d_proxy)``
``action``  ``(n, T + 1)``
``reward``  ``(n, T + 1)``
==========  ====================
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError, StructuralError, ValidationError


def _frozen(x) -> np.ndarray:
    arr = np.array(x, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Trajectory:
    """One episode; ``obs``/``proxy`` include the terminal half-step."""

    obs: np.ndarray
    proxy: np.ndarray
    action: np.ndarray
    reward: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.action) - 1


@dataclass(frozen=True)
class Dataset:
    obs: np.ndarray
    proxy: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    action_interval: tuple[float, float] = (-1.0, 1.0)
    gamma: float = 0.9
    episode_ids: tuple = field(default=())

    def __post_init__(self):
        obs, proxy = np.asarray(self.obs, float), np.asarray(self.proxy, float)
        action, reward = np.asarray(self.action, float), np.asarray(self.reward, float)
        if obs.ndim != 3 or proxy.ndim != 3 or action.ndim != 2 or reward.ndim != 2:
            raise StructuralError("expected obs/proxy of shape (n, T+2, d) and action/reward of shape (n, T+1)")
        n, steps = action.shape
        if n < 1 or steps < 1:
            raise StructuralError("dataset needs at least one trajectory with one step")
        if reward.shape != (n, steps) or obs.shape[:2] != (n, steps + 1) or proxy.shape[:2] != (n, steps + 1):
            raise StructuralError(
                f"inconsistent shapes: obs {obs.shape}, proxy {proxy.shape}, "
                f"action {action.shape}, reward {reward.shape}"
            )
        lo, hi = (float(v) for v in self.action_interval)
        if not lo < hi:
            raise ConfigurationError(f"empty action interval [{lo}, {hi}]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if np.any(action < lo) or np.any(action > hi):
            i, t = np.argwhere((action < lo) | (action > hi))[0]
            raise ValidationError(f"action {action[i, t]} at episode {i}, t={t} outside [{lo}, {hi}]")
        if not np.all(np.isfinite(reward)):
            raise ValidationError("rewards must be finite")
        for name, arr in (("obs", obs), ("proxy", proxy), ("action", action), ("reward", reward)):
            object.__setattr__(self, name, _frozen(arr))
        object.__setattr__(self, "action_interval", (lo, hi))
        object.__setattr__(self, "gamma", float(self.gamma))
        if not self.episode_ids:
            object.__setattr__(self, "episode_ids", tuple(range(n)))

    @property
    def n(self) -> int:
        return self.action.shape[0]

    @property
    def horizon(self) -> int:
        """``T``: index of the last step carrying an action."""
        return self.action.shape[1] - 1

    @property
    def d_obs(self) -> int:
        return self.obs.shape[2]

    @property
    def d_proxy(self) -> int:
        return self.proxy.shape[2]

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(self.obs[i], self.proxy[i], self.action[i], self.reward[i])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(
            self.obs[idx], self.proxy[idx], self.action[idx], self.reward[idx],
            self.action_interval, self.gamma, tuple(self.episode_ids[i] for i in idx),
        )

    def with_gamma(self, gamma: float) -> "Dataset":
        return Dataset(self.obs, self.proxy, self.action, self.reward,
                       self.action_interval, gamma, self.episode_ids)

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], action_interval=(-1.0, 1.0),
                          gamma=0.9) -> "Dataset":
        lengths = {len(tr.action) for tr in trajectories}
        if len(lengths) != 1:
            raise StructuralError(f"trajectories have different lengths: {sorted(lengths)}")
        return cls(
            np.stack([tr.obs for tr in trajectories]),
            np.stack([tr.proxy for tr in trajectories]),
            np.stack([tr.action for tr in trajectories]),
            np.stack([tr.reward for tr in trajectories]),
            action_interval, gamma,
        )


class TransitionTuple(NamedTuple):
    o_prev: np.ndarray
    a_prev: float
    o: np.ndarray
    w: np.ndarray
    a: float
    r: float
    o_next: np.ndarray
    w_next: np.ndarray
    source: tuple[int, int]


@dataclass(frozen=True)
class Transitions:
    """Columnar view of all tuples ``(O_{t-1}, A_{t-1}, O_t, W_t, A_t, R_t, O_{t+1}, W_{t+1})``.

    Rows are ordered trajectory-major, time-minor, for ``t = 1..T``; row
    ``k`` corresponds to ``(i, t) = (k // T, k % T + 1)``.
    """

    o_prev: np.ndarray
    a_prev: np.ndarray
    o: np.ndarray
    w: np.ndarray
    a: np.ndarray
    r: np.ndarray
    o_next: np.ndarray
    w_next: np.ndarray
    episode: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.r)

    def __getitem__(self, k: int) -> TransitionTuple:
        return TransitionTuple(
            self.o_prev[k], float(self.a_prev[k]), self.o[k], self.w[k], float(self.a[k]),
            float(self.r[k]), self.o_next[k], self.w_next[k], (int(self.episode[k]), int(self.t[k])),
        )

    def __iter__(self) -> Iterator[TransitionTuple]:
        return (self[k] for k in range(len(self)))

    def take(self, idx) -> "Transitions":
        idx = np.asarray(idx)
        return Transitions(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def to_transition_tuples(d: Dataset) -> Transitions:
    T = d.horizon
    if T < 1:
        raise StructuralError("trajectories need T >= 1 to form transition tuples")
    n = d.n

    def flat(arr, start, stop):
        x = arr[:, start:stop]
        return x.reshape(n * T, *x.shape[2:])

    return Transitions(
        o_prev=flat(d.obs, 0, T), a_prev=flat(d.action, 0, T),
        o=flat(d.obs, 1, T + 1), w=flat(d.proxy, 1, T + 1),
        a=flat(d.action, 1, T + 1), r=flat(d.reward, 1, T + 1),
        o_next=flat(d.obs, 2, T + 2), w_next=flat(d.proxy, 2, T + 2),
        episode=np.repeat(np.arange(n), T), t=np.tile(np.arange(1, T + 1), n),
    )


def split_kfold(d: Dataset, k: int, seed: int) -> list[tuple[Dataset, Dataset]]:
    """Split by whole trajectory into ``k`` folds.

    Trajectories are permuted with ``seed``; when ``n`` is not divisible by
    ``k`` the first ``n % k`` folds receive one extra trajectory.
    """
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    if k > d.n:
        raise ConfigurationError(f"k={k} exceeds the number of trajectories n={d.n}")
    perm = np.random.default_rng(seed).permutation(d.n)
    folds = np.array_split(perm, k)
    out = []
    for r in range(k):
        val = np.sort(folds[r])
        train = np.sort(np.concatenate([folds[j] for j in range(k) if j != r]))
        out.append((d.subset(train), d.subset(val)))
    return out


# ----------------------------------------------------------------------------
# File formats

def _header(d_obs: int, d_proxy: int) -> list[str]:
    return (["episode", "t"] + [f"obs_{j}" for j in range(d_obs)]
            + [f"proxy_{j}" for j in range(d_proxy)] + ["action", "reward"])


def _rows(d: Dataset):
    T = d.horizon
    for i in range(d.n):
        for t in range(T + 2):
            row = {"episode": d.episode_ids[i], "t": t}
            for j in range(d.d_obs):
                row[f"obs_{j}"] = d.obs[i, t, j]
            for j in range(d.d_proxy):
                row[f"proxy_{j}"] = d.proxy[i, t, j]
            if t <= T:
                row["action"], row["reward"] = d.action[i, t], d.reward[i, t]
            else:
                row["action"], row["reward"] = None, None
            yield row


def write_dataset(d: Dataset, path, format: str | None = None) -> None:
    path = Path(path)
    format = format or _infer_format(path)
    header = _header(d.d_obs, d.d_proxy)
    if format == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in _rows(d):
                writer.writerow(["" if row[c] is None else _fmt(row[c]) for c in header])
    elif format == "jsonl":
        with path.open("w") as fh:
            for row in _rows(d):
                fh.write(json.dumps({c: _json_value(row[c]) for c in header}) + "\n")
    else:
        raise ConfigurationError(f"unknown format {format!r}")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) or isinstance(v, str):
        return str(v)
    return repr(float(v))


def _json_value(v):
    if v is None or isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return int(v)
    return float(v)


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower().lstrip(".")
    if suffix in ("csv", "jsonl"):
        return suffix
    raise ConfigurationError(f"cannot infer format from {path.name!r}; pass format='csv' or 'jsonl'")


def _parse_float(value, line, column) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ParseError(f"column {column!r}: cannot parse {value!r} as a number", line) from None
    if not math.isfinite(x):
        raise ParseError(f"column {column!r}: non-finite value {value!r}", line)
    return x


def _episode_id(value):
    """Integer-looking ids become ints so ids survive a CSV/JSONL round trip unchanged."""
    text = str(value)
    try:
        return int(text)
    except ValueError:
        return text


def load_dataset(path, format: str | None = None, *, gamma: float = 0.9,
                 action_interval=(-1.0, 1.0), d_obs: int | None = None,
                 d_proxy: int | None = None) -> Dataset:
    """Read a dataset from CSV or JSONL.

    Observation and proxy dimensions are read from the column names and
    checked against ``d_obs``/``d_proxy`` when given.
    """
    path = Path(path)
    format = format or _infer_format(path)
    if format == "csv":
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ParseError("empty file", 1) from None
            records = []
            for lineno, values in enumerate(reader, start=2):
                if not values:
                    continue
                if len(values) != len(header):
                    raise ParseError(f"expected {len(header)} fields, got {len(values)}", lineno)
                records.append((lineno, dict(zip(header, values))))
    elif format == "jsonl":
        records, header = [], None
        with path.open() as fh:
            for lineno, text in enumerate(fh, start=1):
                if not text.strip():
                    continue
                try:
                    obj = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
                if not isinstance(obj, dict):
                    raise ParseError("expected a JSON object", lineno)
                header = header or list(obj)
                records.append((lineno, {k: ("" if v is None else v) for k, v in obj.items()}))
        if header is None:
            raise ParseError("empty file", 1)
    else:
        raise ConfigurationError(f"unknown format {format!r}")

    obs_cols = sorted((c for c in header if c.startswith("obs_")), key=lambda c: int(c[4:]))
    proxy_cols = sorted((c for c in header if c.startswith("proxy_")), key=lambda c: int(c[6:]))
    expected = _header(len(obs_cols), len(proxy_cols))
    if set(header) != set(expected):
        raise ParseError(f"columns must be exactly {expected}, got {header}", 1)
    if d_obs is not None and d_obs != len(obs_cols):
        raise StructuralError(f"schema declares d_obs={d_obs} but file has {len(obs_cols)} obs columns")
    if d_proxy is not None and d_proxy != len(proxy_cols):
        raise StructuralError(f"schema declares d_proxy={d_proxy} but file has {len(proxy_cols)} proxy columns")

    episodes: dict = {}
    for lineno, rec in records:
        ep = _episode_id(rec["episode"])
        try:
            t = int(str(rec["t"]))
        except ValueError:
            raise ParseError(f"column 't': cannot parse {rec['t']!r} as an integer", lineno) from None
        o = [_parse_float(rec[c], lineno, c) for c in obs_cols]
        w = [_parse_float(rec[c], lineno, c) for c in proxy_cols]
        a_raw, r_raw = rec["action"], rec["reward"]
        if str(a_raw) == "" and str(r_raw) == "":
            a = r = None
        elif str(a_raw) == "" or str(r_raw) == "":
            raise ParseError("action and reward must both be present or both be empty", lineno)
        else:
            a, r = _parse_float(a_raw, lineno, "action"), _parse_float(r_raw, lineno, "reward")
        steps = episodes.setdefault(ep, {})
        if t in steps:
            raise StructuralError(f"episode {ep!r}: duplicate t={t} (line {lineno})")
        steps[t] = (lineno, o, w, a, r)

    trajectories = []
    for ep, steps in episodes.items():
        ts = sorted(steps)
        if ts != list(range(len(ts))):
            raise StructuralError(f"episode {ep!r}: time indices {ts} are not contiguous from 0")
        last = ts[-1]
        if steps[last][3] is not None:
            raise StructuralError(f"episode {ep!r}: missing terminal row with empty action/reward")
        for t in ts[:-1]:
            if steps[t][3] is None:
                raise StructuralError(f"episode {ep!r}: empty action at non-terminal t={t} (line {steps[t][0]})")
        lo, hi = action_interval
        for t in ts[:-1]:
            a = steps[t][3]
            if not lo <= a <= hi:
                raise ValidationError(
                    f"line {steps[t][0]}: action {a} outside interval [{lo}, {hi}]")
        trajectories.append(Trajectory(
            obs=np.array([steps[t][1] for t in ts]),
            proxy=np.array([steps[t][2] for t in ts]),
            action=np.array([steps[t][3] for t in ts[:-1]]),
            reward=np.array([steps[t][4] for t in ts[:-1]]),
        ))
    if not trajectories:
        raise StructuralError("no trajectories in file")
    d = Dataset.from_trajectories(trajectories, action_interval, gamma)
    return Dataset(d.obs, d.proxy, d.action, d.reward, d.action_interval, d.gamma, tuple(episodes))
