"""Domain types for longitudinal trial data with a truncating event.

Records are stored column-wise.  Index conventions used everywhere in the
package (0-based arrays, 1-based time labels):

* ``D[:, j]`` holds D_{j+1} and ``C[:, j]`` holds C_{j+1} for j = 0..K;
* ``L[:, j, c]`` holds component c of L_{j+1} for j = 0..K-1;
* missing values are NaN in the arrays and ``None`` in the record view.

A record censored before D_{k} is observed has D_{k} missing; a record that
has died carries C = 0 afterwards (death is not censoring).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySubset, SchemaError

ORDERINGS = ("StandardCDL", "TerminalDBeforeC")
DESIGNS = ("TwoArm", "FourArm", "SixArm")
TWO_ARM = 0
FOUR_ARM = 1
BLOCKS = ("AY", "AD")


@dataclass(frozen=True)
class TimeGrid:
    K: int
    ordering: str = "StandardCDL"

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 0:
            raise SchemaError(f"K must be a nonnegative integer, got {self.K!r}")
        if self.ordering not in ORDERINGS:
            raise SchemaError(f"unknown ordering {self.ordering!r}; expected one of {ORDERINGS}")

    @property
    def terminal_d_first(self):
        return self.ordering == "TerminalDBeforeC"


@dataclass(frozen=True)
class ArmAssignment:
    kind: str
    a_y: int
    a_d: int

    def __post_init__(self):
        if self.kind not in ("TwoArm", "FourArm"):
            raise SchemaError(f"unknown arm kind {self.kind!r}")
        if self.a_y not in (0, 1) or self.a_d not in (0, 1):
            raise SchemaError("arm values must be 0 or 1")
        if self.kind == "TwoArm" and self.a_y != self.a_d:
            raise SchemaError("a two-arm assignment has a single treatment value")

    @classmethod
    def two_arm(cls, a):
        return cls("TwoArm", int(a), int(a))

    @classmethod
    def four_arm(cls, a_y, a_d):
        return cls("FourArm", int(a_y), int(a_d))

    @property
    def a(self):
        if self.kind != "TwoArm":
            raise AttributeError("four-arm assignments have no single treatment value")
        return self.a_y


@dataclass(frozen=True)
class LongitudinalRecord:
    id: str
    L0: tuple
    arm: ArmAssignment
    D: tuple
    L: tuple
    C: tuple
    Y: object = None


@dataclass(frozen=True)
class Partition:
    """Split of the time-varying covariates into the A_Y and A_D blocks.

    Densities of the A_D block are evaluated at a_D and those of the A_Y
    block at a_Y (conditionally on the A_D block at the same time).
    """

    ay: tuple = ()
    ad: tuple = ()

    @classmethod
    def default(cls, names):
        return cls(ay=(), ad=tuple(names))

    def block_of(self, name):
        if name in self.ay:
            return "AY"
        if name in self.ad:
            return "AD"
        raise KeyError(name)

    def check(self, names):
        ay, ad = set(self.ay), set(self.ad)
        if ay & ad:
            raise SchemaError(f"partition blocks overlap: {sorted(ay & ad)}")
        if ay | ad != set(names):
            raise SchemaError(
                f"partition {sorted(ay | ad)} does not cover covariates {sorted(names)}")


@dataclass(frozen=True)
class Violation:
    record_id: str
    field: str
    rule: str


def _frozen(x, dtype=float):
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TrialDataset:
    grid: TimeGrid
    L0: np.ndarray
    a_y: np.ndarray
    a_d: np.ndarray
    D: np.ndarray
    C: np.ndarray
    L: np.ndarray
    Y: np.ndarray
    ids: np.ndarray = None
    kind: np.ndarray = None
    design: str = "TwoArm"
    baseline_names: tuple = ()
    covariate_names: tuple = ()
    partition: Partition = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        K = self.grid.K
        L0 = np.asarray(self.L0, dtype=float)
        n = L0.shape[0] if L0.ndim == 2 else len(np.atleast_1d(self.a_y))
        if L0.ndim != 2:
            L0 = L0.reshape(n, -1)
        set_ = object.__setattr__
        set_(self, "L0", _frozen(L0))
        set_(self, "a_y", _frozen(self.a_y, np.int8))
        set_(self, "a_d", _frozen(self.a_d, np.int8))
        set_(self, "D", _frozen(np.asarray(self.D, dtype=float).reshape(n, K + 1)))
        set_(self, "C", _frozen(np.asarray(self.C, dtype=float).reshape(n, K + 1)))
        L = np.asarray(self.L, dtype=float)
        q = len(self.covariate_names)
        set_(self, "L", _frozen(L.reshape(n, K, q)))
        set_(self, "Y", _frozen(np.asarray(self.Y, dtype=float).reshape(n)))
        ids = np.arange(n) if self.ids is None else self.ids
        set_(self, "ids", _frozen(np.asarray([str(i) for i in ids], dtype=object), object))
        if self.design not in DESIGNS:
            raise SchemaError(f"unknown design {self.design!r}")
        if self.kind is None:
            kind = np.full(n, FOUR_ARM if self.design == "FourArm" else TWO_ARM)
        else:
            kind = self.kind
        set_(self, "kind", _frozen(kind, np.int8))
        set_(self, "baseline_names", tuple(self.baseline_names))
        set_(self, "covariate_names", tuple(self.covariate_names))
        if len(self.baseline_names) != self.L0.shape[1]:
            raise SchemaError("baseline_names does not match L0 columns")
        for name, arr in (("a_y", self.a_y), ("a_d", self.a_d), ("kind", self.kind),
                          ("ids", self.ids)):
            if arr.shape != (n,):
                raise SchemaError(f"{name} must have one entry per record")
        part = self.partition or Partition.default(self.covariate_names)
        part.check(self.covariate_names)
        set_(self, "partition", part)

    @property
    def n(self):
        return self.L0.shape[0]

    @property
    def K(self):
        return self.grid.K

    @property
    def q(self):
        return len(self.covariate_names)

    def __len__(self):
        return self.n

    @property
    def A(self):
        if self.design != "TwoArm":
            raise SchemaError("the single-treatment column exists only for two-arm data")
        return self.a_y

    def subset(self, idx):
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return TrialDataset(
            grid=self.grid, L0=self.L0[idx], a_y=self.a_y[idx], a_d=self.a_d[idx],
            D=self.D[idx], C=self.C[idx], L=self.L[idx], Y=self.Y[idx],
            ids=self.ids[idx], kind=self.kind[idx], design=self.design,
            baseline_names=self.baseline_names, covariate_names=self.covariate_names,
            partition=self.partition, meta=dict(self.meta))

    def with_partition(self, partition):
        return TrialDataset(
            grid=self.grid, L0=self.L0, a_y=self.a_y, a_d=self.a_d, D=self.D, C=self.C,
            L=self.L, Y=self.Y, ids=self.ids, kind=self.kind, design=self.design,
            baseline_names=self.baseline_names, covariate_names=self.covariate_names,
            partition=partition, meta=dict(self.meta))

    def record(self, i):
        def opt(v):
            return None if np.isnan(v) else float(v)

        def opt_int(v):
            return None if np.isnan(v) else int(v)

        kind = "TwoArm" if self.kind[i] == TWO_ARM else "FourArm"
        return LongitudinalRecord(
            id=self.ids[i],
            L0=tuple(float(v) for v in self.L0[i]),
            arm=ArmAssignment(kind, int(self.a_y[i]), int(self.a_d[i])),
            D=tuple(opt_int(v) for v in self.D[i]),
            L=tuple(tuple(opt(v) for v in row) for row in self.L[i]),
            C=tuple(opt_int(v) for v in self.C[i]),
            Y=opt(self.Y[i]))

    def records(self):
        return [self.record(i) for i in range(self.n)]

    @classmethod
    def from_records(cls, records, grid, baseline_names=(), covariate_names=(),
                     design="TwoArm", partition=None):
        records = list(records)
        K, q = grid.K, len(covariate_names)

        def num(v):
            return np.nan if v is None else float(v)

        n = len(records)
        L = np.full((n, K, q), np.nan)
        for i, r in enumerate(records):
            for k, row in enumerate(r.L):
                L[i, k] = [num(v) for v in row]
        return cls(
            grid=grid,
            L0=np.array([list(r.L0) for r in records], dtype=float).reshape(n, len(baseline_names)),
            a_y=[r.arm.a_y for r in records], a_d=[r.arm.a_d for r in records],
            D=[[num(v) for v in r.D] for r in records],
            C=[[num(v) for v in r.C] for r in records],
            L=L, Y=[num(r.Y) for r in records], ids=[r.id for r in records],
            kind=[TWO_ARM if r.arm.kind == "TwoArm" else FOUR_ARM for r in records],
            design=design, baseline_names=baseline_names, covariate_names=covariate_names,
            partition=partition)

    def equals(self, other):
        """Exact equality of content, with NaN treated as equal to NaN."""
        if not isinstance(other, TrialDataset):
            return False
        same = (self.grid == other.grid and self.design == other.design
                and self.baseline_names == other.baseline_names
                and self.covariate_names == other.covariate_names
                and self.partition == other.partition and self.n == other.n)
        if not same:
            return False
        arrays = ("L0", "a_y", "a_d", "D", "C", "L", "Y", "kind")
        if not all(np.array_equal(getattr(self, a), getattr(other, a), equal_nan=True)
                   for a in arrays if getattr(self, a).dtype.kind == "f"):
            return False
        return (all(np.array_equal(getattr(self, a), getattr(other, a))
                    for a in arrays if getattr(self, a).dtype.kind != "f")
                and list(self.ids) == list(other.ids))


def expected_observation(ds):
    """Masks of which D, L and Y entries must be present for each record.

    Computed from the observed C and D sequences under the grid ordering.
    Returns (d_obs, l_obs, y_obs) with shapes (n, K+1), (n, K), (n,).
    """
    K = ds.K
    C = np.nan_to_num(ds.C, nan=0.0)
    D = ds.D
    n = ds.n
    d_obs = np.zeros((n, K + 1), dtype=bool)
    for j in range(K + 1):
        if ds.grid.terminal_d_first and j == K:
            cens_before = C[:, K - 1] == 1 if K > 0 else np.zeros(n, dtype=bool)
        else:
            cens_before = C[:, j] == 1
        d_obs[:, j] = ~cens_before
    l_obs = np.zeros((n, K), dtype=bool)
    for k in range(1, K + 1):
        l_obs[:, k - 1] = (D[:, k - 1] == 0) & (C[:, k - 1] == 0)
    y_obs = (D[:, K] == 0) & (C[:, K] == 0)
    return d_obs, l_obs, y_obs


def validate_dataset(ds):
    """Return the list of rule violations; empty when every record is valid."""
    out = []
    K = ds.K
    ids = ds.ids
    D, C, L, Y = ds.D, ds.C, ds.L, ds.Y

    def flag(mask, field_name, rule):
        for i in np.flatnonzero(mask):
            out.append(Violation(ids[i], field_name, rule))

    seen = {}
    for i, rid in enumerate(ids):
        if rid in seen:
            out.append(Violation(rid, "id", "duplicate id"))
        seen[rid] = i

    flag(np.isnan(ds.L0).any(axis=1), "L0", "baseline covariate missing")
    bad_arm = ~np.isin(ds.a_y, (0, 1)) | ~np.isin(ds.a_d, (0, 1))
    flag(bad_arm, "arm", "arm value not binary")
    flag((ds.kind == TWO_ARM) & (ds.a_y != ds.a_d), "arm", "two-arm record with a_Y != a_D")
    if ds.design == "TwoArm":
        flag(ds.kind != TWO_ARM, "arm", "four-arm record in two-arm dataset")
    elif ds.design == "FourArm":
        flag(ds.kind != FOUR_ARM, "arm", "two-arm record in four-arm dataset")

    for name, arr in (("D", D), ("C", C)):
        nonbin = (~np.isnan(arr) & (arr != 0) & (arr != 1)).any(axis=1)
        flag(nonbin, name, "value not binary")
        filled = np.nan_to_num(arr, nan=0.0)
        went_down = ((filled[:, :-1] == 1) & (arr[:, 1:] == 0)).any(axis=1)
        flag(went_down, name, f"{name} not absorbing")

    # death is absorbing and not censoring: C must stay 0 after the event
    died_before = np.zeros_like(C, dtype=bool)
    for j in range(K + 1):
        if ds.grid.terminal_d_first and j == K:
            died_before[:, j] = D[:, j] == 1
        elif j > 0:
            died_before[:, j] = D[:, j - 1] == 1
    flag((died_before & (C == 1)).any(axis=1), "C", "C after event")
    flag((np.isnan(C) & ~died_before).any(axis=1), "C", "C must be present")

    d_obs, l_obs, y_obs = expected_observation(ds)
    flag((d_obs & np.isnan(D)).any(axis=1), "D", "D must be present")
    flag((~d_obs & ~np.isnan(D)).any(axis=1), "D", "D must be missing after censoring")
    if K > 0 and ds.q > 0:
        lmiss = np.isnan(L).any(axis=2)
        lpres = ~np.isnan(L).all(axis=2)
        flag((l_obs & lmiss).any(axis=1), "L", "L must be present")
        flag((~l_obs & lpres).any(axis=1), "L", "L must be missing")
    flag(y_obs & np.isnan(Y), "Y", "Y must be present")
    flag(~y_obs & ~np.isnan(Y), "Y", "Y must be missing")
    return out


def restrict_survivors(ds, a):
    """Records assigned A=a with D_{K+1}=0, in original order."""
    if ds.design != "TwoArm":
        raise SchemaError("restrict_survivors needs a two-arm dataset")
    keep = (ds.A == a) & (ds.D[:, ds.K] == 0)
    if not keep.any():
        raise EmptySubset(f"no survivors with A={a}")
    return ds.subset(keep)
