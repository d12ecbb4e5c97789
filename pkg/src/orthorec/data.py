"""Interaction-log ingestion, filtering, splitting, generation, batching.

The pipeline is: ``ingest_csv`` parses a `user_id,item_id,timestamp` log,
``five_core_filter`` iteratively removes users and items with fewer than
five interactions until a fixpoint, and ``leave_one_out_split`` sorts each
user chronologically (file order breaks timestamp ties) and holds out the
last item for test and the second-to-last for validation. Item ids are
re-indexed densely to 1..num_items by sorted raw id, and users are ordered
by sorted raw id, so exporting a dataset with ``export_csv`` and ingesting
it again reproduces the dataset exactly.

``synth_generate`` builds a reproducible dataset from a latent-factor
model: sequences grow by sampling the next item from
softmax(tau * (u . v_j + v_prev . v_j)) over the full catalog.

``make_batches`` produces fixed-width, left-padded model batches. Training
batches supervise every next-item transition inside the train prefix;
validation and test batches supervise exactly one position, the held-out
item, with the user's history as context.
"""

import csv
import hashlib
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .model import Batch

CSV_HEADER = ["user_id", "item_id", "timestamp"]
MALFORMED_FRACTION_LIMIT = 0.01
MIN_CORE_COUNT = 5

SYNTH_FACTORS = 16
SYNTH_TEMPERATURE = 5.0
SYNTH_LEN_RANGE = (8, 40)
SYNTH_USERS = 2000
SYNTH_ITEMS = 3000


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int


@dataclass
class InteractionDataset:
    """Per-user chronological sequences with a leave-one-out split.

    sequences[u] is user u's full item-id list; the last entry is the test
    item, the second-to-last the validation item, and the rest the train
    prefix. Item ids are dense in 1..num_items; 0 is reserved for padding.
    """

    num_users: int
    num_items: int
    sequences: list

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1:
            raise ValueError("dataset must have at least one user and item")
        if len(self.sequences) != self.num_users:
            raise ValueError(
                f"{len(self.sequences)} sequences but num_users = "
                f"{self.num_users}"
            )
        for seq in self.sequences:
            if len(seq) < 3:
                raise ValueError("every sequence must hold >= 3 items")
            for item in seq:
                if not 1 <= item <= self.num_items:
                    raise ValueError(
                        f"item id {item} outside 1..{self.num_items}"
                    )

    def train_prefix(self, user: int) -> list:
        return self.sequences[user][:-2]

    def val_item(self, user: int) -> int:
        return self.sequences[user][-2]

    def test_item(self, user: int) -> int:
        return self.sequences[user][-1]

    def fingerprint(self) -> str:
        """Stable content hash used to guard cross-run comparisons."""
        digest = hashlib.sha256()
        digest.update(f"{self.num_users}|{self.num_items}|".encode())
        for seq in self.sequences:
            digest.update(",".join(map(str, seq)).encode())
            digest.update(b";")
        return digest.hexdigest()


def ingest_csv(path) -> list:
    """Parse an interaction log; skips and counts malformed lines.

    Raises if the header is wrong or more than 1% of body lines are
    malformed; otherwise a single warning reports the skipped count.
    """
    records = []
    malformed = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(
                f"expected header {','.join(CSV_HEADER)!r}, got {header!r}"
            )
        for row in reader:
            try:
                if len(row) != 3:
                    raise ValueError
                records.append(Interaction(int(row[0]), int(row[1]), int(row[2])))
            except ValueError:
                malformed += 1
    total = len(records) + malformed
    if total and malformed / total > MALFORMED_FRACTION_LIMIT:
        raise ValueError(
            f"{malformed} malformed lines out of {total} exceeds the "
            f"{MALFORMED_FRACTION_LIMIT:.0%} limit"
        )
    if malformed:
        warnings.warn(f"skipped {malformed} malformed line(s)")
    return records


def five_core_filter(records, min_count: int = MIN_CORE_COUNT) -> list:
    """Drop users and items with < min_count interactions, to a fixpoint.

    Order-preserving and idempotent; may return an empty list.
    """
    current = list(records)
    while True:
        user_counts = Counter(r.user_id for r in current)
        item_counts = Counter(r.item_id for r in current)
        kept = [
            r
            for r in current
            if user_counts[r.user_id] >= min_count
            and item_counts[r.item_id] >= min_count
        ]
        if len(kept) == len(current):
            return kept
        current = kept


def leave_one_out_split(records) -> InteractionDataset:
    """Sort each user chronologically and hold out the last two items.

    Timestamp ties are broken by file order; users with fewer than three
    interactions are dropped; item ids are densely re-indexed by sorted
    raw id.
    """
    if not records:
        raise ValueError("no records to split")
    by_user = {}
    for r in records:
        by_user.setdefault(r.user_id, []).append(r)
    kept_users = sorted(u for u, rs in by_user.items() if len(rs) >= 3)
    if not kept_users:
        raise ValueError("no user has >= 3 interactions")
    raw_sequences = []
    raw_item_ids = set()
    for u in kept_users:
        ordered = sorted(by_user[u], key=lambda r: r.timestamp)
        items = [r.item_id for r in ordered]
        raw_sequences.append(items)
        raw_item_ids.update(items)
    dense = {raw: i for i, raw in enumerate(sorted(raw_item_ids), start=1)}
    sequences = [[dense[item] for item in seq] for seq in raw_sequences]
    return InteractionDataset(
        num_users=len(sequences), num_items=len(dense), sequences=sequences
    )


def export_csv(dataset: InteractionDataset, path) -> None:
    """Write a dataset as an interaction log that ingests back exactly.

    Users are numbered 1..num_users and positions double as timestamps.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for u, seq in enumerate(dataset.sequences, start=1):
            for t, item in enumerate(seq):
                writer.writerow([u, item, t])


def _softmax_sample(logits: np.ndarray, rng) -> int:
    shifted = logits - logits.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))


def synth_generate(
    num_users: int = SYNTH_USERS,
    num_items: int = SYNTH_ITEMS,
    factors: int = SYNTH_FACTORS,
    temperature: float = SYNTH_TEMPERATURE,
    seq_len_range: tuple = SYNTH_LEN_RANGE,
    seed: int = 0,
) -> InteractionDataset:
    """Generate a latent-factor dataset, already split leave-one-out.

    User and item factors are N(0, I/k); the first item of a sequence is
    sampled from softmax(tau * u . v_j) and each later item from
    softmax(tau * (u . v_j + v_prev . v_j)) over the whole catalog.
    """
    lo, hi = seq_len_range
    if num_users < 1 or num_items < 1 or factors < 1:
        raise ValueError("num_users, num_items and factors must be positive")
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if not 5 <= lo <= hi:
        raise ValueError(
            f"sequence lengths must satisfy 5 <= lo <= hi, got {seq_len_range}"
        )
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(factors)
    user_factors = rng.normal(0.0, scale, size=(num_users, factors))
    item_factors = rng.normal(0.0, scale, size=(num_items, factors))
    item_affinity = item_factors @ item_factors.T
    records = []
    for u in range(num_users):
        length = int(rng.integers(lo, hi + 1))
        base = temperature * (user_factors[u] @ item_factors.T)
        prev = None
        for t in range(length):
            logits = base if prev is None else base + temperature * item_affinity[prev]
            prev = _softmax_sample(logits, rng)
            # raw ids are 1-based; 0 stays reserved for padding
            records.append(Interaction(u + 1, prev + 1, t))
    return leave_one_out_split(records)


def _pad_batch(rows_in, rows_target, width: int) -> Batch:
    inputs = np.zeros((len(rows_in), width), dtype=np.int64)
    targets = np.zeros((len(rows_in), width), dtype=np.int64)
    for i, (seq_in, seq_target) in enumerate(zip(rows_in, rows_target)):
        assert len(seq_in) == len(seq_target) <= width
        if seq_in:
            inputs[i, -len(seq_in):] = seq_in
            targets[i, -len(seq_in):] = seq_target
    return Batch(inputs, targets)


def make_batches(
    dataset: InteractionDataset,
    max_len: int,
    batch_size: int,
    split: str,
    seed: int = 0,
) -> list:
    """Build one epoch of fixed-width Batch objects for the given split.

    Train batches visit users in a seeded shuffled order and supervise all
    transitions within the train prefix. Validation and test batches keep
    user order and supervise only the held-out item; the test context
    includes the validation item. Sequences keep only their most recent
    items: L transitions for train, L context positions otherwise.
    """
    if max_len < 1 or batch_size < 1:
        raise ValueError("max_len and batch_size must be positive")
    if split not in ("train", "val", "test"):
        raise ValueError(f"unknown split {split!r}")
    order = np.arange(dataset.num_users)
    rows_in, rows_target = [], []
    if split == "train":
        order = np.random.default_rng(seed).permutation(dataset.num_users)
        for u in order:
            prefix = dataset.train_prefix(u)[-(max_len + 1):]
            rows_in.append(prefix[:-1])
            rows_target.append(prefix[1:])
    else:
        for u in order:
            if split == "val":
                context = dataset.train_prefix(u)
                held_out = dataset.val_item(u)
            else:
                context = dataset.train_prefix(u) + [dataset.val_item(u)]
                held_out = dataset.test_item(u)
            context = context[-max_len:]
            rows_in.append(context)
            rows_target.append([0] * (len(context) - 1) + [held_out])
    batches = []
    for start in range(0, len(rows_in), batch_size):
        stop = start + batch_size
        batches.append(_pad_batch(rows_in[start:stop], rows_target[start:stop],
                                  max_len))
    return batches
