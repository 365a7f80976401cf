"""Rating ingestion, implicit-feedback binarization, per-user splits and negatives."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MIN_SYNTH_INTERACTIONS = 5


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RatingRecord:
    user: int
    item: int
    rating: float
    timestamp: int | None = None


class RatingList(list):
    """List of re-indexed :class:`RatingRecord` plus the raw-id lookup tables.

    ``user_ids[k]`` / ``item_ids[k]`` give the original id of index ``k``.
    """

    def __init__(self, records, user_ids, item_ids):
        super().__init__(records)
        self.user_ids = list(user_ids)
        self.item_ids = list(item_ids)


def _reindex(raw_rows):
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    out = []
    for u, i, r, ts in raw_rows:
        uid = users.setdefault(u, len(users))
        iid = items.setdefault(i, len(items))
        out.append(RatingRecord(uid, iid, r, ts))
    return RatingList(out, users, items)


def _parse_id(tok, lineno):
    tok = tok.strip()
    try:
        val = int(tok)
    except ValueError:
        raise DataError(f"line {lineno}: id {tok!r} is not an integer") from None
    if val < 0:
        raise DataError(f"line {lineno}: negative id {val}")
    return tok


def load_ratings(path, format: str = "movielens-dat") -> RatingList:
    """Read ``user::item::rating::timestamp`` lines or a ``user,item,rating[,timestamp]`` CSV.

    User and item ids are re-indexed contiguously in order of first appearance.
    """
    path = Path(path)
    text = path.read_text(encoding="latin-1")
    if not text.strip():
        raise DataError(f"{path}: empty ratings file")
    rows = []
    if format == "movielens-dat":
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.strip().split("::")
            if len(parts) not in (3, 4):
                raise DataError(f"line {lineno}: expected user::item::rating[::timestamp], got {line!r}")
            u = _parse_id(parts[0], lineno)
            i = _parse_id(parts[1], lineno)
            try:
                r = float(parts[2])
                ts = int(parts[3]) if len(parts) == 4 else None
            except ValueError:
                raise DataError(f"line {lineno}: bad rating/timestamp in {line!r}") from None
            rows.append((u, i, r, ts))
    elif format == "csv":
        reader = csv.reader(text.splitlines())
        header = [h.strip().lower() for h in next(reader)]
        if header[:3] != ["user", "item", "rating"] or len(header) > 4 or (
                len(header) == 4 and header[3] != "timestamp"):
            raise DataError(f"line 1: expected header user,item,rating[,timestamp], got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != len(header):
                raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            u = _parse_id(row[0], lineno)
            i = _parse_id(row[1], lineno)
            try:
                r = float(row[2])
                ts = int(row[3]) if len(row) == 4 and row[3].strip() else None
            except ValueError:
                raise DataError(f"line {lineno}: bad rating/timestamp in {row!r}") from None
            rows.append((u, i, r, ts))
    else:
        raise DataError(f"unknown ratings format {format!r}")
    if not rows:
        raise DataError(f"{path}: no rating records")
    return _reindex(rows)


@dataclass(frozen=True)
class InteractionDataset:
    num_users: int
    num_items: int
    train_pos: tuple[np.ndarray, ...]
    test: tuple[np.ndarray, ...]
    train_neg: tuple[np.ndarray, ...]
    unsplit_users: int = 0

    def __post_init__(self):
        for u in range(self.num_users):
            pos, te, neg = self.train_pos[u], self.test[u], self.train_neg[u]
            if pos.size == 0:
                raise DataError(f"user {u} has no training interaction")
            for arr in (pos, te, neg):
                if arr.size and (arr.min() < 0 or arr.max() >= self.num_items):
                    raise DataError(f"user {u}: item id out of range")
            if np.intersect1d(pos, te).size or np.intersect1d(pos, neg).size or np.intersect1d(te, neg).size:
                raise DataError(f"user {u}: train/test/negative sets overlap")

    def interacted(self, user: int) -> np.ndarray:
        return np.union1d(self.train_pos[user], self.test[user])

    def item_counts(self) -> np.ndarray:
        """Per-item interaction count over train and test."""
        counts = np.zeros(self.num_items, dtype=np.int64)
        for u in range(self.num_users):
            counts[self.train_pos[u]] += 1
            counts[self.test[u]] += 1
        return counts

    def least_popular(self, n: int) -> list[int]:
        """``n`` least-interacted items, ties by smallest id."""
        counts = self.item_counts()
        order = np.lexsort((np.arange(self.num_items), counts))
        return [int(i) for i in order[:n]]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.num_users, self.num_items], dtype=np.int64).tobytes())
        for group in (self.train_pos, self.test, self.train_neg):
            for arr in group:
                h.update(np.int64(arr.size).tobytes())
                h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()


def build_dataset(records, test_fraction: float = 0.2, neg_ratio: int = 4, seed: int = 0,
                  split: str = "random", num_items: int | None = None) -> InteractionDataset:
    """Binarize ``records`` and split each user's interactions into train/test.

    ``floor(test_fraction * n)`` interactions per user are held out, either the
    most recent (``split="temporal"``, needs timestamps) or uniformly at random.
    Train negatives are drawn from the user's non-interacted items,
    ``neg_ratio`` per train positive.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if neg_ratio < 1:
        raise ValueError(f"neg_ratio must be >= 1, got {neg_ratio}")
    if split not in ("random", "temporal"):
        raise ValueError(f"unknown split {split!r}")
    records = list(records)
    if not records:
        raise DataError("no records")
    n_users = max(r.user for r in records) + 1
    n_items = max(r.item for r in records) + 1 if num_items is None else num_items

    # latest timestamp per (user, item); duplicates collapse under binarization
    per_user: list[dict[int, int]] = [dict() for _ in range(n_users)]
    for r in records:
        ts = r.timestamp if r.timestamp is not None else -1
        prev = per_user[r.user].get(r.item)
        if prev is None or ts > prev:
            per_user[r.user][r.item] = ts

    rng = np.random.default_rng(seed)
    train_pos, test, train_neg = [], [], []
    unsplit = 0
    empty_users = [u for u in range(n_users) if not per_user[u]]
    if empty_users:
        raise DataError(f"users without interactions after re-indexing: {empty_users[:5]}")
    for u in range(n_users):
        items = np.array(sorted(per_user[u]), dtype=np.int64)
        n = items.size
        n_test = int(np.floor(test_fraction * n))
        if n < 2:
            unsplit += 1
            n_test = 0
        if split == "temporal":
            ts = np.array([per_user[u][i] for i in items])
            order = np.lexsort((items, ts))  # oldest first, ties by id
        else:
            order = rng.permutation(n)
        held = np.sort(items[order[n - n_test:]]) if n_test else np.empty(0, dtype=np.int64)
        pos = np.sort(items[order[: n - n_test]])
        candidates = np.setdiff1d(np.arange(n_items), items, assume_unique=True)
        want = neg_ratio * pos.size
        if candidates.size == 0:
            neg = np.empty(0, dtype=np.int64)
        elif want <= candidates.size:
            neg = np.sort(rng.choice(candidates, size=want, replace=False))
        else:
            neg = np.sort(rng.choice(candidates, size=want, replace=True))
        train_pos.append(pos)
        test.append(held)
        train_neg.append(neg.astype(np.int64))
    if unsplit:
        log.warning("%d users with <2 interactions kept entirely in train", unsplit)
    return InteractionDataset(n_users, n_items, tuple(train_pos), tuple(test), tuple(train_neg), unsplit)


def synth_dataset(num_users: int, num_items: int, density: float, popularity_skew: float,
                  seed: int = 0, test_fraction: float = 0.2, neg_ratio: int = 4) -> InteractionDataset:
    """Zipf-popularity synthetic interactions; every user gets at least 5 items.

    Item popularity is proportional to ``1 / rank**popularity_skew`` over a
    random permutation of item ids.
    """
    if not 0 < density < 1:
        raise ValueError(f"density must be in (0, 1), got {density}")
    if popularity_skew < 0:
        raise ValueError("popularity_skew must be >= 0")
    if num_users < 1:
        raise DataError("num_users must be >= 1")
    # room for the minimum profile plus at least one negative per positive
    if num_items < 2 * MIN_SYNTH_INTERACTIONS:
        raise DataError(f"num_items={num_items} too small for {MIN_SYNTH_INTERACTIONS} interactions per user")
    rng = np.random.default_rng(seed)
    ranks = rng.permutation(num_items) + 1
    weights = 1.0 / ranks.astype(np.float64) ** popularity_skew
    probs = weights / weights.sum()
    max_len = num_items // 2
    records = []
    for u in range(num_users):
        n = int(np.clip(rng.binomial(num_items, density), MIN_SYNTH_INTERACTIONS, max_len))
        items = rng.choice(num_items, size=n, replace=False, p=probs)
        records.extend(RatingRecord(u, int(i), 1.0) for i in items)
    return build_dataset(records, test_fraction=test_fraction, neg_ratio=neg_ratio,
                         seed=int(rng.integers(2**31)), num_items=num_items)
