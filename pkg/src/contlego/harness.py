"""Sequential-experience training loop with replay, evaluation, checkpoints.

A run trains one model on a list of experiences in order, evaluating every
epoch on every experience's test set, and records the full accuracy tensor
C[position][experience][epoch] needed by the continual-learning metrics.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .data import Dataset, DataError
from .model import TransformerModel, ModelConfig, forward, predict_assignments, init_model
from .optim import AdamState, adam_step, LrSchedule, lr_at


class HarnessError(Exception):
    pass


class ScheduleError(HarnessError):
    pass


class CheckpointError(HarnessError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_experience: int = 100
    batch_size: int = 500
    schedule: LrSchedule = field(default_factory=LrSchedule)
    replay_fraction: float = 0.0
    eval_every: int = 1
    eval_subsample: int | None = None  # None = full test sets
    eval_batch_size: int = 500
    reset_optimizer: bool = False  # keep Adam moments across boundaries by default

    def __post_init__(self):
        if not 0.0 <= self.replay_fraction <= 1.0:
            raise ScheduleError(f"replay_fraction {self.replay_fraction} outside [0, 1]")
        if self.epochs_per_experience < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ScheduleError("epochs_per_experience, batch_size, eval_every must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = asdict(self.schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["schedule"] = LrSchedule(**d["schedule"])
        return cls(**d)


class ReplayBuffer:
    """Examples kept from finished experiences, tagged by source."""

    def __init__(self):
        self._tokens: list[np.ndarray] = []
        self._labels: list[np.ndarray] = []
        self.tags: list[str] = []
        self.counts: dict[str, int] = {}

    def __len__(self) -> int:
        return sum(self.counts.values())

    def arrays(self):
        if not self._tokens:
            return None, None
        return np.concatenate(self._tokens), np.concatenate(self._labels)

    def add(self, tag: str, tokens: np.ndarray, labels: np.ndarray):
        if tag in self.counts:
            raise ScheduleError(f"buffer already holds examples tagged {tag!r}")
        self._tokens.append(tokens)
        self._labels.append(labels)
        self.tags.append(tag)
        self.counts[tag] = tokens.shape[0]


def update_buffer(
    buffer: ReplayBuffer,
    tag: str,
    train_tokens: np.ndarray,
    train_labels: np.ndarray,
    replay_fraction: float,
    rng: np.random.Generator,
) -> ReplayBuffer:
    """One-shot uniform sample (without replacement) at an experience boundary."""
    capacity = int(np.floor(replay_fraction * train_tokens.shape[0]))
    if capacity > 0:
        keep = rng.choice(train_tokens.shape[0], size=capacity, replace=False)
        keep.sort()
        buffer.add(tag, train_tokens[keep].copy(), train_labels[keep].copy())
    return buffer


def build_batch(
    cur_tokens: np.ndarray,
    cur_labels: np.ndarray,
    buffer: ReplayBuffer,
    batch_size: int,
    rng: np.random.Generator,
):
    """Uniform draw from the pooled current train set plus buffer contents."""
    if cur_tokens.shape[0] == 0:
        raise ScheduleError("build_batch: empty current dataset")
    buf_tokens, buf_labels = buffer.arrays()
    if buf_tokens is None:
        pool_t, pool_l = cur_tokens, cur_labels
    else:
        pool_t = np.concatenate([cur_tokens, buf_tokens])
        pool_l = np.concatenate([cur_labels, buf_labels])
    idx = rng.choice(pool_t.shape[0], size=batch_size, replace=False)
    return pool_t[idx], pool_l[idx], idx


def evaluate(
    model: TransformerModel,
    dataset: Dataset,
    batch_size: int = 500,
    limit: int | None = None,
):
    """Per-canonical-position accuracies and mean loss; no parameter mutation."""
    tokens, labels, canon = dataset.arrays()
    if limit is not None and limit < tokens.shape[0]:
        tokens, labels, canon = tokens[:limit], labels[:limit], canon[:limit]
    n = tokens.shape[0]
    correct_sum = None
    loss_sum = 0.0
    with ag.no_grad():
        for lo in range(0, n, batch_size):
            hi = min(lo + batch_size, n)
            logits, _ = forward(model, tokens[lo:hi])
            loss = ag.masked_cross_entropy(logits, labels[lo:hi])
            loss_sum += float(loss.data) * (hi - lo)
            _, correct = predict_assignments(model, tokens[lo:hi], labels[lo:hi], canon[lo:hi], logits=logits)
            batch_correct = correct.sum(axis=0)
            correct_sum = batch_correct if correct_sum is None else correct_sum + batch_correct
    return correct_sum.astype(np.float64) / n, loss_sum / n


@dataclass
class CheckpointManifest:
    entries: list = field(default_factory=list)  # (global_epoch, experience_index, path, digest)

    def to_jsonable(self):
        return [
            {"global_epoch": e, "experience": i, "path": p, "digest": d}
            for (e, i, p, d) in self.entries
        ]


@dataclass
class RunRecord:
    """Full per-epoch bookkeeping of one sequential run.

    accuracy[j-1, i-1, k-1] is test accuracy on position a_j of experience i's
    test set after global epoch k (1-based indices in the accessors).
    """

    accuracy: np.ndarray  # (positions, experiences, epochs)
    eval_loss: np.ndarray  # (experiences, epochs)
    train_loss: np.ndarray  # (epochs,)
    lr_curve: np.ndarray  # (epochs,)
    experience_trained: np.ndarray  # (epochs,) 1-based experience index per epoch
    epochs_per_experience: int
    num_experiences: int
    seed: int
    config: dict
    manifest: CheckpointManifest = field(default_factory=CheckpointManifest)

    def C(self, j: int, i: int, k: int) -> float:
        return float(self.accuracy[j - 1, i - 1, k - 1])

    @property
    def num_epochs(self) -> int:
        return self.accuracy.shape[2]

    def phase_window(self, i: int) -> range:
        """Global epochs (1-based, inclusive) spent training experience i."""
        if not 1 <= i <= self.num_experiences:
            raise ScheduleError(f"experience index {i} outside 1..{self.num_experiences}")
        e = self.epochs_per_experience
        return range((i - 1) * e + 1, i * e + 1)


def _resolve_num_positions(test_datasets) -> int:
    counts = {ds.arrays()[2].shape[1] for ds in test_datasets}
    if len(counts) != 1:
        raise ScheduleError(f"test datasets disagree on clause count: {sorted(counts)}")
    return counts.pop()


def train_sequential(
    model: TransformerModel,
    experience_names: list[str],
    train_datasets: list[Dataset],
    test_datasets: list[Dataset],
    cfg: TrainConfig,
    seed: int,
    checkpoint_dir: str | None = None,
    progress=None,
) -> RunRecord:
    if not (len(experience_names) == len(train_datasets) == len(test_datasets)):
        raise ScheduleError(
            f"schedule mismatch: {len(experience_names)} experiences, "
            f"{len(train_datasets)} train sets, {len(test_datasets)} test sets"
        )
    for name, ds in zip(experience_names, train_datasets):
        if cfg.batch_size > len(ds.examples):
            raise ScheduleError(
                f"batch size {cfg.batch_size} exceeds train set of {name} ({len(ds.examples)})"
            )

    rng = np.random.default_rng([seed, 0xC0FFEE])
    n_exp = len(experience_names)
    n_pos = _resolve_num_positions(test_datasets)
    total_epochs = n_exp * cfg.epochs_per_experience

    accuracy = np.full((n_pos, n_exp, total_epochs), np.nan)
    eval_loss = np.full((n_exp, total_epochs), np.nan)
    train_loss = np.zeros(total_epochs)
    lr_curve = np.zeros(total_epochs)
    experience_trained = np.zeros(total_epochs, dtype=np.int64)
    manifest = CheckpointManifest()

    opt = AdamState()
    buffer = ReplayBuffer()
    test_arrays = [ds for ds in test_datasets]

    k = 0  # global epoch counter (1-based after increment)
    for i, (name, train_ds) in enumerate(zip(experience_names, train_datasets), start=1):
        cur_tokens, cur_labels, _ = train_ds.arrays()
        steps = cur_tokens.shape[0] // cfg.batch_size
        if cfg.reset_optimizer:
            opt = AdamState()
        for epoch_in_phase in range(1, cfg.epochs_per_experience + 1):
            k += 1
            t = k - 1 if cfg.schedule.mode == "global" else epoch_in_phase - 1
            lr = lr_at(cfg.schedule, t)
            losses = 0.0
            for _ in range(steps):
                bt, bl, _ = build_batch(cur_tokens, cur_labels, buffer, cfg.batch_size, rng)
                with ag.Tape() as tape:
                    logits, _ = forward(model, bt, train=True)
                    loss = ag.masked_cross_entropy(logits, bl)
                    losses += float(loss.data)
                    tape.backward(loss)
                adam_step(model.params, opt, lr)
            train_loss[k - 1] = losses / max(steps, 1)
            lr_curve[k - 1] = lr
            experience_trained[k - 1] = i
            if k % cfg.eval_every == 0 or epoch_in_phase == cfg.epochs_per_experience:
                for ei, test_ds in enumerate(test_arrays):
                    acc, ls = evaluate(
                        model, test_ds, batch_size=cfg.eval_batch_size, limit=cfg.eval_subsample
                    )
                    accuracy[:, ei, k - 1] = acc
                    eval_loss[ei, k - 1] = ls
            if progress is not None:
                progress(k, total_epochs, train_loss[k - 1])
        buffer = update_buffer(buffer, name, cur_tokens, cur_labels, cfg.replay_fraction, rng)
        if checkpoint_dir is not None:
            path = os.path.join(checkpoint_dir, f"checkpoint_exp{i}_epoch{k}.npz")
            digest = save_checkpoint(model, path)
            manifest.entries.append((k, i, path, digest))

    return RunRecord(
        accuracy=accuracy,
        eval_loss=eval_loss,
        train_loss=train_loss,
        lr_curve=lr_curve,
        experience_trained=experience_trained,
        epochs_per_experience=cfg.epochs_per_experience,
        num_experiences=n_exp,
        seed=seed,
        config=cfg.to_dict(),
        manifest=manifest,
    )


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(model: TransformerModel, path: str) -> str:
    """Write parameters + config to an npz; return sha256 of the file bytes."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    buf = io.BytesIO()
    arrays = {name: t.data for name, t in sorted(model.params.items())}
    arrays["__config__"] = np.frombuffer(
        json.dumps(model.config.to_dict(), sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(buf, **arrays)
    raw = buf.getvalue()
    with open(path, "wb") as f:
        f.write(raw)
    return hashlib.sha256(raw).hexdigest()


def load_checkpoint(
    path: str,
    expected_config: ModelConfig | None = None,
    expected_digest: str | None = None,
) -> TransformerModel:
    with open(path, "rb") as f:
        raw = f.read()
    if expected_digest is not None:
        got = hashlib.sha256(raw).hexdigest()
        if got != expected_digest:
            raise CheckpointError(f"digest mismatch for {path}: {got} != {expected_digest}")
    with np.load(io.BytesIO(raw)) as z:
        cfg_dict = json.loads(bytes(z["__config__"]).decode())
        config = ModelConfig.from_dict(cfg_dict)
        if expected_config is not None and config != expected_config:
            raise CheckpointError(
                f"checkpoint config {cfg_dict} does not match expected "
                f"{expected_config.to_dict()}"
            )
        model = init_model(config, np.random.default_rng(0))
        for name in model.params:
            if name not in z:
                raise CheckpointError(f"checkpoint missing parameter {name}")
            model.params[name] = ag.Tensor(z[name], requires_grad=True)
    return model


# --------------------------------------------------------------------------
# run-directory emission

CURVES_HEADER = [
    "global_epoch", "experience_trained", "eval_experience",
    "position", "accuracy", "loss", "lr",
]


def write_run_record(record: RunRecord, run_dir: str):
    """config.json + curves.csv (one row per epoch/experience/position) + manifest."""
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        json.dump({"seed": record.seed, "train": record.config}, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(run_dir, "curves.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CURVES_HEADER)
        P, I, K = record.accuracy.shape
        for k in range(1, K + 1):
            for i in range(1, I + 1):
                for j in range(1, P + 1):
                    acc = record.accuracy[j - 1, i - 1, k - 1]
                    if np.isnan(acc):
                        continue
                    w.writerow([
                        k, int(record.experience_trained[k - 1]), i, j,
                        repr(float(acc)),
                        repr(float(record.eval_loss[i - 1, k - 1])),
                        repr(float(record.lr_curve[k - 1])),
                    ])
    with open(os.path.join(run_dir, "manifest.json"), "w") as f:
        json.dump(record.manifest.to_jsonable(), f, indent=2, sort_keys=True)
        f.write("\n")


def read_run_record(run_dir: str) -> RunRecord:
    """Rebuild a RunRecord from curves.csv + config.json (checkpoints stay on disk)."""
    with open(os.path.join(run_dir, "config.json")) as f:
        meta = json.load(f)
    rows = []
    with open(os.path.join(run_dir, "curves.csv"), newline="") as f:
        r = csv.DictReader(f)
        if r.fieldnames != CURVES_HEADER:
            raise HarnessError(f"unexpected curves.csv columns: {r.fieldnames}")
        rows = list(r)
    if not rows:
        raise HarnessError(f"no rows in {run_dir}/curves.csv")
    K = max(int(x["global_epoch"]) for x in rows)
    I = max(int(x["eval_experience"]) for x in rows)
    P = max(int(x["position"]) for x in rows)
    accuracy = np.full((P, I, K), np.nan)
    eval_loss = np.full((I, K), np.nan)
    lr_curve = np.zeros(K)
    experience_trained = np.zeros(K, dtype=np.int64)
    for x in rows:
        k, i, j = int(x["global_epoch"]), int(x["eval_experience"]), int(x["position"])
        accuracy[j - 1, i - 1, k - 1] = float(x["accuracy"])
        eval_loss[i - 1, k - 1] = float(x["loss"])
        lr_curve[k - 1] = float(x["lr"])
        experience_trained[k - 1] = int(x["experience_trained"])
    n_exp = int(experience_trained.max())
    epochs_per = K // n_exp
    manifest = CheckpointManifest()
    man_path = os.path.join(run_dir, "manifest.json")
    if os.path.exists(man_path):
        with open(man_path) as f:
            for e in json.load(f):
                manifest.entries.append((e["global_epoch"], e["experience"], e["path"], e["digest"]))
    return RunRecord(
        accuracy=accuracy,
        eval_loss=eval_loss,
        train_loss=np.zeros(K),
        lr_curve=lr_curve,
        experience_trained=experience_trained,
        epochs_per_experience=epochs_per,
        num_experiences=n_exp,
        seed=meta["seed"],
        config=meta["train"],
        manifest=manifest,
    )
