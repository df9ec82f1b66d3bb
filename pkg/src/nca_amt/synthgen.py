"""Synthetic feature/label data with a controllable scene shortcut.

Each sample is ``x = a * U_a e_action + s * U_s e_scene + o * U_o sum(e_objects) + sigma * noise``.
The three signals live in disjoint coordinate blocks followed by a block of
pure-noise coordinates; noise is added to every coordinate. Every action has
a dedicated object that is always present (a necessary condition by
construction), other objects show up as distractors at a fixed rate, and the
scene is drawn from ``P(scene | action)``. The training regime uses ``P``;
the validation regime either reuses it or uses an anti-correlated ``P'``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .manifest import LabelUniverse, Manifest, Record

REGIMES = ("iid", "anti")
_REGIME_CODE = {"train": 1, "val": 2, "probe": 3}


class SpecError(ValueError):
    pass


def home_scene_matrix(n_actions: int, n_scenes: int, home_prob: float, shift: int = 0):
    """Rows put ``home_prob`` on scene ``(a + shift) % n_scenes`` and spread the rest evenly."""
    p = np.zeros((n_actions, n_scenes))
    if n_scenes == 1:
        p[:, 0] = 1.0
        return p
    rest = (1.0 - home_prob) / (n_scenes - 1)
    p[:] = rest
    for a in range(n_actions):
        p[a, (a + shift) % n_scenes] = home_prob
    return p


@dataclass
class SynthSpec:
    n_actions: int = 5
    n_scenes: int = 2
    n_objects: int = 6
    samples_per_action: int = 600
    val_samples_per_action: int = 600
    action_dim: int = 16
    scene_dim: int = 8
    object_dim: int = 12
    noise_dim: int = 4
    action_strength: float = 1.6
    scene_strength: float = 2.0
    object_strength: float = 1.0
    sigma: float = 0.6
    distractor_rate: float = 0.2
    scene_given_action: list = field(default_factory=list)
    val_scene_given_action: list = field(default_factory=list)
    regime: str = "anti"
    seed: int = 0

    def __post_init__(self):
        if not self.scene_given_action:
            self.scene_given_action = home_scene_matrix(self.n_actions, self.n_scenes, 0.9).tolist()
        if not self.val_scene_given_action:
            if self.regime == "anti":
                self.val_scene_given_action = home_scene_matrix(
                    self.n_actions, self.n_scenes, 0.9, shift=1).tolist()
            else:
                self.val_scene_given_action = [list(r) for r in self.scene_given_action]

    @property
    def input_dim(self) -> int:
        return self.action_dim + self.scene_dim + self.object_dim + self.noise_dim

    def validate(self) -> None:
        if min(self.n_actions, self.n_scenes, self.n_objects) < 1:
            raise SpecError("class counts must be positive")
        if self.n_objects < self.n_actions:
            raise SpecError("need at least one dedicated object per action")
        if min(self.samples_per_action, self.val_samples_per_action) < 1:
            raise SpecError("sample counts must be positive")
        if self.regime not in REGIMES:
            raise SpecError(f"regime must be one of {REGIMES}")
        for name, n in (("action_dim", self.n_actions), ("scene_dim", self.n_scenes),
                        ("object_dim", self.n_objects)):
            d = getattr(self, name)
            if d < 0 or (0 < d < n):
                raise SpecError(f"{name}={d} cannot embed {n} classes (use 0 or >= {n})")
        if self.noise_dim < 0 or self.input_dim < 1:
            raise SpecError("dims must be nonnegative with at least one coordinate overall")
        if self.sigma < 0 or not 0 <= self.distractor_rate <= 1:
            raise SpecError("sigma must be >= 0 and distractor_rate in [0, 1]")
        for name in ("scene_given_action", "val_scene_given_action"):
            p = np.asarray(getattr(self, name), dtype=float)
            if p.shape != (self.n_actions, self.n_scenes):
                raise SpecError(f"{name} must be {self.n_actions} x {self.n_scenes}")
            if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
                raise SpecError(f"{name} rows must be probability vectors")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_benchmark(seed: int = 0) -> SynthSpec:
    """Five actions, two scenes; each action sits in its home scene 90% of the
    time during training and in the other scene 90% of the time in validation."""
    return SynthSpec(seed=seed)


@dataclass
class Embedding:
    action: np.ndarray   # action_dim x n_actions
    scene: np.ndarray
    object: np.ndarray

    @classmethod
    def draw(cls, spec: SynthSpec) -> "Embedding":
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xE4B]))

        def block(d, k):
            if d == 0:
                return np.zeros((0, k))
            u = rng.standard_normal((d, k))
            return u / np.linalg.norm(u, axis=0, keepdims=True)

        return cls(block(spec.action_dim, spec.n_actions), block(spec.scene_dim, spec.n_scenes),
                   block(spec.object_dim, spec.n_objects))


@dataclass
class SynthDataset:
    x: np.ndarray
    actions: np.ndarray
    scenes: np.ndarray
    objects: np.ndarray          # n x n_objects multi-hot
    ids: tuple[str, ...]
    regime: str

    def __len__(self):
        return self.x.shape[0]


def _sample(spec: SynthSpec, emb: Embedding, split: str, p: np.ndarray,
            per_action: int) -> SynthDataset:
    n = spec.n_actions * per_action
    d = spec.input_dim
    x = np.zeros((n, d))
    actions = np.repeat(np.arange(spec.n_actions), per_action)
    scenes = np.zeros(n, dtype=np.int64)
    objects = np.zeros((n, spec.n_objects), dtype=np.int64)
    a0, s0 = 0, spec.action_dim
    o0 = s0 + spec.scene_dim
    z0 = o0 + spec.object_dim
    for i in range(n):
        # one generator per sample keeps each row independent of generation order
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, _REGIME_CODE[split], i]))
        a = actions[i]
        s = int(rng.choice(spec.n_scenes, p=p[a]))
        objs = rng.random(spec.n_objects) < spec.distractor_rate
        objs[a] = True
        scenes[i] = s
        objects[i] = objs
        x[i, a0:s0] = spec.action_strength * emb.action[:, a]
        x[i, s0:o0] = spec.scene_strength * emb.scene[:, s]
        x[i, o0:z0] = spec.object_strength * emb.object @ objs
        x[i] += spec.sigma * rng.standard_normal(d)
    ids = tuple(f"{split}-{i:05d}" for i in range(n))
    regime = {"train": "iid", "val": spec.regime, "probe": "balanced"}[split]
    return SynthDataset(x, actions, scenes, objects, ids, regime)


def generate(spec: SynthSpec) -> tuple[SynthDataset, SynthDataset]:
    """Train and validation datasets; bit-identical for identical specs."""
    spec.validate()
    emb = Embedding.draw(spec)
    p = np.asarray(spec.scene_given_action, dtype=float)
    q = np.asarray(spec.val_scene_given_action, dtype=float)
    return (_sample(spec, emb, "train", p, spec.samples_per_action),
            _sample(spec, emb, "val", q, spec.val_samples_per_action))


def generate_probe(spec: SynthSpec, per_action: int | None = None) -> SynthDataset:
    """Held-out set with scenes drawn uniformly for every action.

    Scene is independent of action here, so whatever a feature map retains
    about the scene shows up in this set without being confounded by action.
    """
    spec.validate()
    p = np.full((spec.n_actions, spec.n_scenes), 1.0 / spec.n_scenes)
    return _sample(spec, Embedding.draw(spec), "probe", p,
                   per_action or spec.val_samples_per_action)


def decode(spec: SynthSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Recover (actions, scenes, object multi-hot) from noise-free features."""
    emb = Embedding.draw(spec)
    a0, s0 = 0, spec.action_dim
    o0 = s0 + spec.scene_dim
    z0 = o0 + spec.object_dim
    act = np.argmax(x[:, a0:s0] @ emb.action, axis=1)
    scn = np.argmax(x[:, s0:o0] @ emb.scene, axis=1)
    coef = np.linalg.lstsq(spec.object_strength * emb.object, x[:, o0:z0].T, rcond=None)[0].T
    return act, scn, (np.round(coef) > 0.5).astype(np.int64)


def _names(prefix: str, k: int) -> tuple[str, ...]:
    width = len(str(k - 1))
    return tuple(f"{prefix}{i:0{width}d}" for i in range(k))


def universe(spec: SynthSpec) -> LabelUniverse:
    # zero-padded names keep sorted order equal to numeric order
    return LabelUniverse(
        ("action", "scene", "object"),
        {"action": _names("a", spec.n_actions), "scene": _names("s", spec.n_scenes),
         "object": _names("o", spec.n_objects)},
        "action")


def to_manifest(spec: SynthSpec, *datasets: SynthDataset) -> Manifest:
    """Records of the given datasets, in order, under the spec's universe."""
    u = universe(spec)
    records = []
    for ds in datasets:
        for i, rid in enumerate(ds.ids):
            aux = {"scene": frozenset({int(ds.scenes[i])}),
                   "object": frozenset(int(j) for j in np.flatnonzero(ds.objects[i]))}
            records.append(Record(rid, int(ds.actions[i]), aux))
    return Manifest(u, tuple(records))
