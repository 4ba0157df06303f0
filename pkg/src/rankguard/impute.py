"""Block completion of a missing corner from a low-rank fit of the observed blocks.

With the observed core X11 (rows ``R``, columns ``C``), the side blocks X12,
X21 and the missing corner X22 on the complements, the corner is predicted
as L21 pinv(L11) L12 where each L is a rank-r robust fit of its block.
"""

import csv
import hashlib
import io
import os
import shutil
import tarfile
import tempfile
import urllib.request
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .criteria import dicmr_trace
from .dpdfit import DpdParams, fit_sequential
from .errors import (
    CorruptData,
    DivisionByZero,
    InvalidAlpha,
    NetworkError,
    ParseError,
    RankOutOfRange,
    ShapeError,
    ZeroScaleColumn,
)
from .matcore import PINV_FLOOR, BlockPartition, SvdTriplets, classical_svd

MAD_CONSISTENCY = 1.4826
PANCAN_URL = "https://archive.ics.uci.edu/static/public/401/gene+expression+cancer+rna+seq.zip"


@dataclass(frozen=True)
class ImputeConfig:
    """``rank`` is an integer (fixed) or ``"dicmr"``; ``partition`` picks the rows and columns of X11."""

    partition: BlockPartition
    alpha: float = 0.75
    rank: object = "dicmr"
    normalize: bool = True
    r_max: int = None
    mad_consistency: bool = False

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise InvalidAlpha(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.rank != "dicmr":
            if not isinstance(self.rank, (int, np.integer)) or self.rank < 0:
                raise RankOutOfRange(f"rank must be 'dicmr' or a non-negative integer, got {self.rank!r}")


@dataclass
class ImputeResult:
    X22_hat: np.ndarray
    selected_rank: int
    alpha_used: float
    relative_rmse: float = None


@dataclass
class Normalization:
    centers: np.ndarray
    scales: np.ndarray

    def apply(self, X):
        return (X - self.centers) / self.scales

    def invert(self, Z):
        return Z * self.scales + self.centers


def normalize_columns(X, mask=None, consistency=False):
    """Center each column at its median and scale by its MAD over observed cells.

    ``mask`` marks observed cells (default: the finite ones). Columns with zero
    MAD keep scale 1 and raise a ``ZeroScaleColumn`` warning.
    Returns (Z, Normalization).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ShapeError("expected a 2-D matrix")
    mask = np.isfinite(X) if mask is None else np.asarray(mask, dtype=bool) & np.isfinite(X)
    obs = np.where(mask, X, np.nan)
    counts = mask.sum(axis=0)
    if np.any(counts < 2):
        bad = int(np.flatnonzero(counts < 2)[0])
        raise ShapeError(f"column {bad} has fewer than 2 observed values")
    centers = np.nanmedian(obs, axis=0)
    scales = np.nanmedian(np.abs(obs - centers), axis=0)
    if consistency:
        scales = scales * MAD_CONSISTENCY
    zero = scales <= 0
    if np.any(zero):
        warnings.warn(
            f"{int(zero.sum())} column(s) with zero MAD, first {int(np.flatnonzero(zero)[0])}; using scale 1",
            ZeroScaleColumn,
            stacklevel=2,
        )
        scales = np.where(zero, 1.0, scales)
    norm = Normalization(centers, scales)
    return norm.apply(X), norm


def relative_rmse(truth, estimate):
    """Squared Frobenius error relative to the squared norm of the truth."""
    truth = np.asarray(truth, dtype=float)
    estimate = np.asarray(estimate, dtype=float)
    if truth.shape != estimate.shape:
        raise ShapeError(f"shapes differ: {truth.shape} vs {estimate.shape}")
    den = float(np.sum(truth * truth))
    if den == 0:
        raise DivisionByZero("truth has zero norm")
    return float(np.sum((truth - estimate) ** 2) / den)


def split_blocks(X, partition: BlockPartition):
    """Return (X11, X12, X21, row complement, column complement)."""
    X = np.asarray(X, dtype=float)
    partition.check(X.shape)
    R = np.array(partition.rows)
    C = np.array(partition.cols)
    Rc, Cc = partition.complement(X.shape)
    return X[np.ix_(R, C)], X[np.ix_(R, Cc)], X[np.ix_(Rc, C)], Rc, Cc


def _low_rank(B, r, alpha):
    if r == 0:
        return SvdTriplets.empty(*B.shape)
    if alpha == 0:
        return classical_svd(B, r)
    return fit_sequential(B, DpdParams(alpha=alpha), r).triplets


def _default_r_max(shape):
    return max(1, min(20, min(shape) // 2))


def select_rank(top, alpha, r_max=None):
    """DICMR rank of the fully observed row block [X11 X12]."""
    if not alpha > 0:
        raise InvalidAlpha("DICMR rank selection needs alpha > 0; pass a fixed rank at alpha = 0")
    r_max = _default_r_max(top.shape) if r_max is None else r_max
    return dicmr_trace(top, alpha, r_max).selected


def block_impute(X, config: ImputeConfig, truth=None) -> ImputeResult:
    """Predict the missing corner. Values of X inside the corner are ignored.

    ``truth`` (the real corner, if known) only feeds the reported relative RMSE.
    """
    X = np.array(X, dtype=float)
    part = config.partition
    part.check(X.shape)
    R = np.array(part.rows)
    C = np.array(part.cols)
    Rc, Cc = part.complement(X.shape)
    observed = np.ones(X.shape, dtype=bool)
    observed[np.ix_(Rc, Cc)] = False
    if not np.all(np.isfinite(X[observed])):
        raise ShapeError("observed blocks must be fully observed and finite")
    X[~observed] = np.nan
    norm = None
    if config.normalize:
        Z, norm = normalize_columns(X, observed, config.mad_consistency)
    else:
        Z = X
    X11 = Z[np.ix_(R, C)]
    X12 = Z[np.ix_(R, Cc)]
    X21 = Z[np.ix_(Rc, C)]
    a = config.alpha
    limit = min(min(X11.shape), min(X12.shape), min(X21.shape))
    if config.rank == "dicmr":
        top = np.hstack([X11, X12])
        r_max = min(_default_r_max(top.shape), limit) if config.r_max is None else config.r_max
        r = select_rank(top, a, r_max)
    else:
        r = int(config.rank)
    if r > limit:
        raise RankOutOfRange(f"rank {r} exceeds the smallest block dimension {limit}")
    L11 = _low_rank(X11, r, a).reconstruct()
    L12 = _low_rank(X12, r, a).reconstruct()
    L21 = _low_rank(X21, r, a).reconstruct()
    U, s, Vt = np.linalg.svd(L11, full_matrices=False)
    keep = int(np.sum(s[:r] > max(PINV_FLOOR, 1e-10 * (s[0] if len(s) else 0.0))))
    if keep < r:
        warnings.warn(f"fitted X11 block has numerical rank {keep} < {r}; truncating", stacklevel=2)
    pinv = (Vt[:keep].T / s[:keep]) @ U[:, :keep].T
    Z22 = L21 @ pinv @ L12
    X22 = Z22 if norm is None else Z22 * norm.scales[Cc] + norm.centers[Cc]
    rel = None if truth is None else relative_rmse(truth, X22)
    return ImputeResult(X22, r, a, rel)


def monitor_alpha(X, partition, alpha_grid, truth=None, rank="dicmr", normalize=True, r_max=None):
    """Selected rank and imputation error along an ascending grid of alpha.

    Returns dicts with keys alpha, rank, rel_rmse and error; a failed grid
    point keeps its row with rank and rel_rmse set to None.
    """
    grid = [float(a) for a in alpha_grid]
    if not grid:
        raise ValueError("alpha grid is empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("alpha grid must be sorted ascending")
    rows = []
    for a in grid:
        try:
            cfg = ImputeConfig(partition, a, rank, normalize, r_max)
            res = block_impute(X, cfg, truth)
            rows.append({"alpha": a, "rank": res.selected_rank, "rel_rmse": res.relative_rmse, "error": None})
        except Exception as exc:  # recorded per grid point, never fatal
            rows.append({"alpha": a, "rank": None, "rel_rmse": None, "error": f"{type(exc).__name__}: {exc}"})
    return rows


def monitor_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "rank", "rel_rmse"])
    for row in rows:
        rank = "" if row["rank"] is None else row["rank"]
        rel = "" if row["rel_rmse"] is None else f"{row['rel_rmse']:.6g}"
        w.writerow([f"{row['alpha']:g}", rank, rel])
    return buf.getvalue()


# ---------------------------------------------------------------- PANCAN data


@dataclass
class ExpressionData:
    X: np.ndarray
    labels: list
    samples: list
    genes: list
    sha256: str


def cache_dir(path=None):
    if path is not None:
        return Path(path)
    env = os.environ.get("RANKGUARD_CACHE")
    return Path(env) if env else Path.home() / ".cache" / "rankguard"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _download(url, dest):
    tmp = None
    try:
        with urllib.request.urlopen(url, timeout=60) as resp:
            fd, tmp = tempfile.mkstemp(dir=dest.parent, suffix=".part")
            with os.fdopen(fd, "wb") as fh:
                shutil.copyfileobj(resp, fh)
        os.replace(tmp, dest)  # atomic within the cache directory
    except OSError as exc:
        if tmp and os.path.exists(tmp):
            os.remove(tmp)
        raise NetworkError(f"cache miss for {dest.name} and download of {url} failed: {exc}") from exc


def _read_table(fh, name):
    text = io.TextIOWrapper(fh, encoding="utf-8")
    reader = csv.reader(text)
    try:
        header = next(reader)
    except StopIteration:
        raise CorruptData(f"{name} is empty") from None
    ids, rows = [], []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise ParseError(f"{name} line {lineno}: expected {len(header)} cells, found {len(rec)}", row=lineno)
        ids.append(rec[0])
        rows.append(rec[1:])
    return header[1:], ids, rows


def _members(archive):
    """Yield (name, file object) for data.csv and labels.csv in a tar/zip archive or directory."""
    archive = Path(archive)
    if archive.is_dir():
        for name in ("data.csv", "labels.csv"):
            found = list(archive.rglob(name))
            if not found:
                raise CorruptData(f"{name} not found under {archive}")
            yield name, open(found[0], "rb")
        return
    if tarfile.is_tarfile(archive):
        with tarfile.open(archive) as tf:
            for name in ("data.csv", "labels.csv"):
                member = next((m for m in tf.getmembers() if m.name.endswith(name)), None)
                if member is None:
                    raise CorruptData(f"{name} not found in {archive.name}")
                yield name, tf.extractfile(member)
        return
    import zipfile

    if zipfile.is_zipfile(archive):
        with zipfile.ZipFile(archive) as zf:
            inner = [n for n in zf.namelist() if n.endswith(".tar.gz")]
            if inner:
                # the public archive wraps a tarball
                with tempfile.TemporaryDirectory() as td:
                    path = Path(zf.extract(inner[0], td))
                    yield from _members(path)
                return
            for name in ("data.csv", "labels.csv"):
                hit = next((n for n in zf.namelist() if n.endswith(name)), None)
                if hit is None:
                    raise CorruptData(f"{name} not found in {archive.name}")
                yield name, zf.open(hit)
        return
    raise CorruptData(f"{archive} is neither a directory nor a tar/zip archive")


def pancan_ingest(source=PANCAN_URL, cache=None, expected_sha256=None) -> ExpressionData:
    """Load the TCGA pan-cancer RNA-Seq expression matrix and its tumor labels.

    ``source`` is a URL or a local archive/directory. URLs are downloaded once
    into the cache; later calls reuse the cached file without network access.
    The archive checksum is stored next to it on first download and checked on
    every later load (or against ``expected_sha256`` when given).
    """
    src = str(source)
    if src.startswith(("http://", "https://")):
        root = cache_dir(cache)
        root.mkdir(parents=True, exist_ok=True)
        archive = root / src.rstrip("/").rsplit("/", 1)[-1]
        if not archive.exists():
            _download(src, archive)
    else:
        archive = Path(src)
        if not archive.exists():
            raise NetworkError(f"local source {archive} does not exist")
    digest = _sha256(archive) if archive.is_file() else ""
    if archive.is_file():
        stamp = archive.with_name(archive.name + ".sha256")
        want = expected_sha256 or (stamp.read_text().strip() if stamp.exists() else None)
        if want is not None and want != digest:
            raise CorruptData(f"checksum mismatch for {archive.name}: expected {want}, got {digest}")
        if not stamp.exists():
            stamp.write_text(digest + "\n")
    tables = {}
    for name, fh in _members(archive):
        with fh:
            tables[name] = _read_table(fh, name)
    genes, samples, rows = tables["data.csv"]
    _, label_ids, label_rows = tables["labels.csv"]
    if label_ids != samples:
        raise CorruptData("labels.csv rows do not match data.csv samples")
    try:
        X = np.array(rows, dtype=float)
    except ValueError as exc:
        raise ParseError(f"data.csv: non-numeric entry ({exc})") from None
    return ExpressionData(X, [r[0] for r in label_rows], samples, genes, digest)
