"""Patient-donor pair records and the secret compatibility graph.

A quote is a pair's private medical record: blood-type indicator vectors,
HLA antigen/antibody vectors, CPRA, and prioritization attributes.  The
patient-side blood acceptance vector is derived in plaintext by the hospital
before sharing, so the secure blood check collapses to one dot product.

Medical rule (virtual crossmatch): donor i can give to patient j iff the
donor's blood type is one the patient accepts AND no patient antibody hits
a donor antigen.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .abb import AbbSession, RingConfig, ShareArray, deal
from . import gates
from .solvers import PlainGraph

logger = logging.getLogger("kexmpc.compat")

BLOOD_TYPES = ("O", "A", "B", "AB")
# patient blood type -> donor blood types the patient can receive
ABO_ACCEPTS = {
    "O": ("O",),
    "A": ("O", "A"),
    "B": ("O", "B"),
    "AB": ("O", "A", "B", "AB"),
}
DEFAULT_ANTIGEN_SPACE = 50
HIGH_CPRA_DEFAULT = 80  # conventional clinical threshold for "highly sensitized"

QUOTE_SCHEMA = "kexmpc-quotes/1"

PRIO_ATTR_NAMES = ("age", "pediatric", "prior_living_donor", "region", "donor_age")


class QuoteFormatError(ValueError):
    pass


@dataclass
class InputQuote:
    """One patient-donor pair's private inputs."""

    donor_blood: np.ndarray  # 4-entry one-hot, order O, A, B, AB
    patient_accepts: np.ndarray  # 4-entry indicator of acceptable donor types
    donor_antigens: np.ndarray  # L-entry 0/1
    patient_antibodies: np.ndarray  # L-entry 0/1
    cpra: int  # 0..100
    prio_attrs: np.ndarray = field(
        default_factory=lambda: np.zeros(len(PRIO_ATTR_NAMES), dtype=np.int64)
    )

    def __post_init__(self):
        self.donor_blood = np.asarray(self.donor_blood, dtype=np.int64)
        self.patient_accepts = np.asarray(self.patient_accepts, dtype=np.int64)
        self.donor_antigens = np.asarray(self.donor_antigens, dtype=np.int64)
        self.patient_antibodies = np.asarray(self.patient_antibodies, dtype=np.int64)
        self.prio_attrs = np.asarray(self.prio_attrs, dtype=np.int64)

    def check(self, antigen_space: int) -> None:
        if self.donor_blood.shape != (4,) or self.donor_blood.sum() != 1:
            raise QuoteFormatError("donor_blood must be a 4-entry one-hot vector")
        if self.patient_accepts.shape != (4,) or not set(self.patient_accepts) <= {0, 1}:
            raise QuoteFormatError("patient_accepts must be a 4-entry 0/1 vector")
        for name, vec in (
            ("donor_antigens", self.donor_antigens),
            ("patient_antibodies", self.patient_antibodies),
        ):
            if vec.shape != (antigen_space,) or not set(np.unique(vec)) <= {0, 1}:
                raise QuoteFormatError(f"{name} must be a {antigen_space}-entry 0/1 vector")
        if not 0 <= self.cpra <= 100:
            raise QuoteFormatError("cpra must be in 0..100")
        if self.prio_attrs.shape != (len(PRIO_ATTR_NAMES),) or self.prio_attrs.min() < 0:
            raise QuoteFormatError("prio_attrs must be 5 non-negative integers")

    @classmethod
    def make(
        cls,
        donor_type: str,
        patient_type: str,
        donor_antigens,
        patient_antibodies,
        cpra: int = 0,
        age: int = 40,
        pediatric: bool = False,
        prior_living_donor: bool = False,
        region: int = 0,
        donor_age: int = 40,
    ) -> "InputQuote":
        blood = np.array([int(t == donor_type) for t in BLOOD_TYPES])
        accepts = np.array([int(t in ABO_ACCEPTS[patient_type]) for t in BLOOD_TYPES])
        return cls(
            donor_blood=blood,
            patient_accepts=accepts,
            donor_antigens=np.asarray(donor_antigens),
            patient_antibodies=np.asarray(patient_antibodies),
            cpra=cpra,
            prio_attrs=np.array(
                [age, int(pediatric), int(prior_living_donor), region, donor_age]
            ),
        )

    @property
    def highly_sensitized(self) -> bool:
        return self.cpra >= HIGH_CPRA_DEFAULT


# -- prioritization policies ---------------------------------------------------


@dataclass(frozen=True)
class PrioPolicy:
    """Edge-weight policy for the compatibility graph.

    The default maximizes the number of transplants: every edge weighs 1.
    The weighted policy is a linear combination of public criteria with
    caller-supplied integer coefficients (there are no default coefficients).
    """

    kind: str = "uniform"
    coefficients: tuple[tuple[str, int], ...] = ()
    age_window: int = 10
    high_cpra: int = HIGH_CPRA_DEFAULT

    CRITERIA = ("region_match", "pediatric", "prior_living_donor", "age_close", "high_cpra")

    @classmethod
    def uniform(cls) -> "PrioPolicy":
        return cls()

    @classmethod
    def weighted(cls, coefficients: dict[str, int], age_window: int = 10) -> "PrioPolicy":
        unknown = set(coefficients) - set(cls.CRITERIA)
        if unknown:
            raise ValueError(f"unknown criteria: {sorted(unknown)}")
        if any(c < 0 for c in coefficients.values()):
            raise ValueError("coefficients must be non-negative")
        return cls(kind="weighted", coefficients=tuple(sorted(coefficients.items())))

    @property
    def w_max(self) -> int:
        if self.kind == "uniform":
            return 1
        return max(1, sum(c for _, c in self.coefficients))

    def _features_plain(self, qi: InputQuote, qj: InputQuote) -> dict[str, int]:
        ai, aj = qi.prio_attrs, qj.prio_attrs
        return {
            "region_match": int(ai[3] == aj[3]),
            "pediatric": int(aj[1]),
            "prior_living_donor": int(aj[2]),
            "age_close": int(abs(int(ai[4]) - int(aj[0])) <= self.age_window),
            "high_cpra": int(qj.cpra >= self.high_cpra),
        }

    def plain_weight(self, qi: InputQuote, qj: InputQuote) -> int:
        """Weight of the edge donor(i) -> patient(j)."""
        if self.kind == "uniform":
            return 1
        feats = self._features_plain(qi, qj)
        return sum(c * feats[name] for name, c in self.coefficients)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "coefficients": dict(self.coefficients),
            "age_window": self.age_window,
            "high_cpra": self.high_cpra,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PrioPolicy":
        if obj.get("kind", "uniform") == "uniform":
            return cls.uniform()
        policy = cls.weighted(
            {k: int(v) for k, v in obj.get("coefficients", {}).items()},
            age_window=int(obj.get("age_window", 10)),
        )
        return policy


# -- plaintext mirror ------------------------------------------------------------


def plain_compatible(qi: InputQuote, qj: InputQuote) -> bool:
    """Donor of pair i vs patient of pair j."""
    blood_ok = int(qi.donor_blood @ qj.patient_accepts) == 1
    hla_clash = int(qi.donor_antigens @ qj.patient_antibodies) > 0
    return blood_ok and not hla_clash


def plain_graph(quotes: list[InputQuote], policy: PrioPolicy | None = None) -> PlainGraph:
    """Reference compatibility graph used by oracles and the simulator."""
    policy = policy or PrioPolicy.uniform()
    n = len(quotes)
    donor_blood = np.stack([q.donor_blood for q in quotes])
    accepts = np.stack([q.patient_accepts for q in quotes])
    antigens = np.stack([q.donor_antigens for q in quotes])
    antibodies = np.stack([q.patient_antibodies for q in quotes])
    blood_ok = (donor_blood @ accepts.T) > 0
    clash = (antigens @ antibodies.T) > 0
    adj = (blood_ok & ~clash).astype(np.int8)
    np.fill_diagonal(adj, 0)
    if policy.kind == "uniform":
        weights = adj.astype(np.int64)
    else:
        weights = np.zeros((n, n), dtype=np.int64)
        for i in range(n):
            for j in range(n):
                if i != j:
                    weights[i, j] = policy.plain_weight(quotes[i], quotes[j])
        weights *= adj
    return PlainGraph(n, adj, weights)


# -- quote file format (JSON lines, explicit schema version) ----------------------


def write_quotes(path, quotes: list[InputQuote], antigen_space: int | None = None) -> None:
    L = antigen_space or (quotes[0].donor_antigens.shape[0] if quotes else DEFAULT_ANTIGEN_SPACE)
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema": QUOTE_SCHEMA, "antigen_space": L, "pairs": len(quotes)}) + "\n")
        for q in quotes:
            q.check(L)
            fh.write(
                json.dumps(
                    {
                        "donor_blood": q.donor_blood.tolist(),
                        "patient_accepts": q.patient_accepts.tolist(),
                        "donor_antigens": q.donor_antigens.tolist(),
                        "patient_antibodies": q.patient_antibodies.tolist(),
                        "cpra": int(q.cpra),
                        "prio_attrs": q.prio_attrs.tolist(),
                    }
                )
                + "\n"
            )


def read_quotes(path) -> tuple[list[InputQuote], int]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise QuoteFormatError(f"{path}: empty quote file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise QuoteFormatError(f"{path}:1: bad header: {exc}") from None
    if header.get("schema") != QUOTE_SCHEMA:
        raise QuoteFormatError(f"{path}:1: unsupported schema {header.get('schema')!r}")
    L = int(header["antigen_space"])
    quotes = []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            q = InputQuote(
                donor_blood=obj["donor_blood"],
                patient_accepts=obj["patient_accepts"],
                donor_antigens=obj["donor_antigens"],
                patient_antibodies=obj["patient_antibodies"],
                cpra=int(obj["cpra"]),
                prio_attrs=obj.get("prio_attrs", [0] * len(PRIO_ATTR_NAMES)),
            )
            q.check(L)
        except (json.JSONDecodeError, KeyError, QuoteFormatError, TypeError) as exc:
            raise QuoteFormatError(f"{path}:{no}: {exc}") from None
        quotes.append(q)
    if len(quotes) != int(header.get("pairs", len(quotes))):
        raise QuoteFormatError(f"{path}: header promises {header['pairs']} pairs")
    return quotes, L


# -- secret-shared quotes ------------------------------------------------------------


def quote_field_arrays(quotes: list[InputQuote]) -> dict[str, np.ndarray]:
    return {
        "donor_blood": np.stack([q.donor_blood for q in quotes]),
        "patient_accepts": np.stack([q.patient_accepts for q in quotes]),
        "donor_antigens": np.stack([q.donor_antigens for q in quotes]),
        "patient_antibodies": np.stack([q.patient_antibodies for q in quotes]),
        "cpra": np.array([q.cpra for q in quotes], dtype=np.int64),
        "prio_attrs": np.stack([q.prio_attrs for q in quotes]),
    }


def deal_quotes(
    quotes: list[InputQuote], ring: RingConfig, rng: np.random.Generator
) -> list[dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Hospital-side sharing: three per-peer component bundles."""
    arrays = quote_field_arrays(quotes)
    per_peer: list[dict] = [{}, {}, {}]
    for name, arr in arrays.items():
        for peer, comp in enumerate(deal(arr, ring, rng)):
            per_peer[peer][name] = comp
    return per_peer


@dataclass
class SharedQuotes:
    """One peer's shares of every quote field, stacked across pairs."""

    n: int
    antigen_space: int
    fields: dict[str, ShareArray]

    @classmethod
    def from_components(cls, components: dict[str, tuple[np.ndarray, np.ndarray]]) -> "SharedQuotes":
        fields = {name: ShareArray(np.asarray(c0), np.asarray(c1)) for name, (c0, c1) in components.items()}
        n, L = fields["donor_antigens"].shape
        return cls(n=n, antigen_space=L, fields=fields)

    def __getattr__(self, name):
        try:
            return self.__dict__["fields"][name]
        except KeyError:
            raise AttributeError(name) from None


def hla_cmp_bits(antigen_space: int) -> int:
    """Comparison width for antigen-antibody dot products (values <= L)."""
    return antigen_space.bit_length() + 2


def comp_check_matrix(abb: AbbSession, sq: SharedQuotes) -> ShareArray:
    """Adjacency matrix M: M(i,j) opens to 1 iff donor i suits patient j.

    All N*(N-1) ordered pairs are evaluated in shared batched rounds:
    blood dot product, antigen-antibody dot product, one comparison, one
    conjunction.  The diagonal stays zero.
    """
    n = sq.n
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    di = [i for i, _ in pairs]
    pj = [j for _, j in pairs]
    blood = gates.dot_product(abb, sq.donor_blood.take(di, 0), sq.patient_accepts.take(pj, 0))
    hits = gates.dot_product(abb, sq.donor_antigens.take(di, 0), sq.patient_antibodies.take(pj, 0))
    clash = gates.gt(abb, hits, abb.zeros(hits.shape), hla_cmp_bits(sq.antigen_space))
    ok = abb.mul(blood, abb.add_public(-clash, 1))
    m = abb.zeros((n, n))
    m[di, pj] = ok
    return m


def prio_matrix(abb: AbbSession, sq: SharedQuotes, policy: PrioPolicy) -> ShareArray:
    """Edge-weight matrix W under the chosen policy, batched like M."""
    n = sq.n
    if policy.kind == "uniform":
        ones = np.ones((n, n), dtype=np.uint64)
        np.fill_diagonal(ones, 0)
        return abb.const(ones)
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    di = [i for i, _ in pairs]
    pj = [j for _, j in pairs]
    attrs_i = sq.prio_attrs.take(di, 0)
    attrs_j = sq.prio_attrs.take(pj, 0)
    age_bits = 9  # ages < 128, differences fit comfortably
    features: dict[str, ShareArray] = {}
    wanted = {name for name, _ in policy.coefficients}
    if "region_match" in wanted:
        features["region_match"] = gates.eq(abb, attrs_i[:, 3], attrs_j[:, 3], 12)
    if "pediatric" in wanted:
        features["pediatric"] = attrs_j[:, 1]
    if "prior_living_donor" in wanted:
        features["prior_living_donor"] = attrs_j[:, 2]
    if "age_close" in wanted:
        diff = attrs_i[:, 4] - attrs_j[:, 0]  # donor age vs patient age
        over = gates.gt(abb, diff, abb.const(np.full(len(pairs), policy.age_window, dtype=np.uint64)), age_bits)
        under = gates.gt(abb, -diff, abb.const(np.full(len(pairs), policy.age_window, dtype=np.uint64)), age_bits)
        features["age_close"] = abb.mul(abb.add_public(-over, 1), abb.add_public(-under, 1))
    if "high_cpra" in wanted:
        cpra_j = sq.cpra.take(pj, 0)
        features["high_cpra"] = gates.gt(
            abb, cpra_j, abb.const(np.full(len(pairs), policy.high_cpra - 1, dtype=np.uint64)), 9
        )
    total = abb.zeros((len(pairs),))
    for name, coeff in policy.coefficients:
        total = total + features[name].scale(coeff)
    w = abb.zeros((n, n))
    w[di, pj] = total
    return w
