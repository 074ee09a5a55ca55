"""Continual-learning metrics over lower-triangular accuracy matrices, plus
capacity accounting reports.

Everything is on the percent scale (0-100).  ``m[i][j]`` is the accuracy on
task j+1 measured after training task i+1; the matrix is lower triangular
because later tasks do not exist yet when earlier rows are recorded.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MatrixStateError(ValueError):
    pass


class LedgerIntegrityError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    """T x T lower-triangular accuracy-percent matrix with task names."""

    m: np.ndarray
    task_names: list

    @staticmethod
    def empty(task_names: list) -> "AccuracyMatrix":
        n = len(task_names)
        m = np.full((n, n), np.nan)
        return AccuracyMatrix(m=m, task_names=list(task_names))

    @staticmethod
    def from_rows(rows: list, task_names: list | None = None) -> "AccuracyMatrix":
        n = len(rows)
        names = task_names or [f"T{i + 1}" for i in range(n)]
        out = AccuracyMatrix.empty(names)
        for i, row in enumerate(rows):
            if len(row) != i + 1:
                raise MatrixStateError(f"row {i + 1} has {len(row)} entries, expected {i + 1}")
            out.m[i, : i + 1] = row
        return out

    @property
    def n_tasks(self) -> int:
        return self.m.shape[0]

    def set(self, trained: int, evaluated: int, accuracy: float) -> None:
        """Record accuracy on ``evaluated`` after training ``trained`` (1-based)."""
        if evaluated > trained:
            raise MatrixStateError("upper-triangular entries are undefined")
        self.m[trained - 1, evaluated - 1] = accuracy

    def row(self, t: int) -> np.ndarray:
        """The completed accuracy row after training task ``t`` (1-based)."""
        row = self.m[t - 1, :t]
        if np.any(np.isnan(row)):
            raise MatrixStateError(f"row {t} is incomplete")
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["train_step"] + list(self.task_names))
        for i in range(self.n_tasks):
            cells = [repr(float(self.m[i, j])) if j <= i else "" for j in range(self.n_tasks)]
            writer.writerow([i + 1] + cells)
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "AccuracyMatrix":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        names = header[1:]
        out = AccuracyMatrix.empty(names)
        for row in reader:
            if not row:
                continue
            i = int(row[0]) - 1
            for j, cell in enumerate(row[1:]):
                if cell != "":
                    out.m[i, j] = float(cell)
        return out


def acc_t(matrix: AccuracyMatrix, t: int) -> float:
    """Running average accuracy after training task ``t`` (1-based)."""
    return float(np.mean(matrix.row(t)))


def retention_rt(matrix: AccuracyMatrix) -> float:
    """Mean accuracy over all tasks after the final task is trained."""
    return acc_t(matrix, matrix.n_tasks)


def forgetting_ft(matrix: AccuracyMatrix) -> float:
    """Mean peak-minus-final decline per task.

    The peak for task j is taken over the states at or after training task
    j and before the final state, i.e. rows j..T-1 (1-based); the final row
    is the reference being compared against.  Undefined for T = 1.
    """
    T = matrix.n_tasks
    if T < 2:
        raise MatrixStateError("forgetting is undefined for a single task")
    final = matrix.row(T)
    total = 0.0
    for j in range(1, T):
        history = [float(matrix.m[l - 1, j - 1]) for l in range(j, T)]
        if any(math.isnan(v) for v in history):
            raise MatrixStateError(f"column {j} is incomplete")
        total += max(history) - final[j - 1]
    return total / (T - 1)


def gen_loss(zero_shot: list, post: list) -> float:
    """Mean score drift versus the untouched model over general benchmarks."""
    if len(zero_shot) != len(post):
        raise MatrixStateError(
            f"score lists differ in length ({len(zero_shot)} vs {len(post)})"
        )
    return float(np.mean([p - z for z, p in zip(zero_shot, post)]))


# -- capacity accounting ------------------------------------------------------

@dataclass
class LedgerRow:
    step: int
    task_added: str
    total: int
    shared: int
    unique: list    # per task, index 0 = task 1

    def check(self) -> None:
        if self.total != self.shared + sum(self.unique):
            raise LedgerIntegrityError(
                f"step {self.step}: total {self.total} != shared {self.shared} "
                f"+ unique {sum(self.unique)}"
            )


@dataclass
class CapacityLedger:
    rows: list = field(default_factory=list)

    def add(self, step: int, task_added: str, total: int, shared: int, unique: list) -> None:
        row = LedgerRow(step=step, task_added=task_added, total=int(total),
                        shared=int(shared), unique=[int(u) for u in unique])
        row.check()
        self.rows.append(row)

    def validate(self) -> None:
        for row in self.rows:
            row.check()

    def n_tasks(self) -> int:
        return max((len(r.unique) for r in self.rows), default=0)

    def to_csv(self) -> str:
        n = self.n_tasks()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "task_added", "total", "shared"]
                        + [f"unique_t{i + 1}" for i in range(n)])
        for row in self.rows:
            unique = row.unique + [0] * (n - len(row.unique))
            writer.writerow([row.step, row.task_added, row.total, row.shared] + unique)
        return buf.getvalue()

    @staticmethod
    def from_csv(text: str) -> "CapacityLedger":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        n = sum(1 for h in header if h.startswith("unique_t"))
        ledger = CapacityLedger()
        for row in reader:
            if not row:
                continue
            ledger.add(step=int(row[0]), task_added=row[1], total=int(row[2]),
                       shared=int(row[3]), unique=[int(v) for v in row[4:4 + n]])
        return ledger


def capacity_report(ledger: CapacityLedger) -> list[dict]:
    """Per-step rows with the shared percentage appended.

    Raises :class:`LedgerIntegrityError` naming the first row whose counts
    do not satisfy total = shared + sum(unique).
    """
    ledger.validate()
    out = []
    for row in ledger.rows:
        shared_pct = 100.0 * row.shared / row.total if row.total else 0.0
        out.append({
            "step": row.step,
            "task_added": row.task_added,
            "total": row.total,
            "shared": row.shared,
            "unique": list(row.unique),
            "shared_pct": shared_pct,
        })
    return out


def capacity_comparison(ledgers: dict) -> list[dict]:
    """Side-by-side totals/shared/shared%% for ledgers of different budgets."""
    reports = {label: capacity_report(ledger) for label, ledger in ledgers.items()}
    steps = sorted({r["step"] for rep in reports.values() for r in rep})
    out = []
    for step in steps:
        row = {"step": step}
        for label, rep in reports.items():
            match = next((r for r in rep if r["step"] == step), None)
            if match:
                row[f"{label}_total"] = match["total"]
                row[f"{label}_shared"] = match["shared"]
                row[f"{label}_shared_pct"] = match["shared_pct"]
        out.append(row)
    return out


# -- bundled reference fixtures ----------------------------------------------

FIXTURE_DIR = Path(__file__).parent / "fixtures"


def fixture_path(name: str) -> Path:
    return FIXTURE_DIR / name


def load_reference_matrix() -> AccuracyMatrix:
    """The bundled 6-task accuracy matrix used for metric verification."""
    return AccuracyMatrix.from_csv(fixture_path("reference_accuracy_matrix.csv").read_text())


def load_reference_general_scores() -> dict:
    """Bundled general-benchmark score rows: method -> list of scores."""
    out: dict = {}
    with open(fixture_path("reference_general_scores.csv")) as f:
        for record in csv.DictReader(f):
            method = record.pop("method")
            out[method] = [float(v) for v in record.values()]
    return out


def load_reference_capacity(budget: int) -> CapacityLedger:
    """Bundled capacity evolution table for the given selection budget."""
    return CapacityLedger.from_csv(fixture_path(f"reference_capacity_{budget}.csv").read_text())
