"""Finite dihedral groups: construction, composition, validation, serialization.

Elements are represented by contiguous integer ids; the multiplication table
is the single source of truth for composition.  The convention throughout is
``compose(a, b)`` = "state a acted on by b", so chains read left to right.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

__all__ = [
    "GroupError",
    "GroupElement",
    "CayleyTable",
    "GroupSpec",
    "build_dihedral",
    "validate_group",
    "D3_NAMES",
]

# Canonical D3 vocabulary: identity, the two rotations, the three reflections.
D3_NAMES = ("val", "rotate", "spin", "flip", "reflect", "mirror")


class GroupError(ValueError):
    """Invalid group construction or element lookup."""


@dataclass(frozen=True)
class GroupElement:
    id: int
    name: str


@dataclass(frozen=True)
class CayleyTable:
    n: int
    table: tuple  # tuple of n tuples of element ids

    def __post_init__(self):
        if len(self.table) != self.n or any(len(r) != self.n for r in self.table):
            raise GroupError(f"table must be {self.n}x{self.n}")

    def lookup(self, a: int, b: int) -> int:
        return self.table[a][b]


@dataclass(frozen=True)
class GroupSpec:
    elements: tuple  # tuple of GroupElement, in id order
    identity: int
    cayley: CayleyTable
    _name_to_id: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        ids = [e.id for e in self.elements]
        if ids != list(range(len(self.elements))):
            raise GroupError("element ids must be contiguous from 0")
        names = [e.name for e in self.elements]
        if len(set(names)) != len(names):
            raise GroupError("element names must be unique")
        object.__setattr__(self, "_name_to_id", {e.name: e.id for e in self.elements})

    @property
    def order(self) -> int:
        return len(self.elements)

    def id_of(self, name: str) -> int:
        try:
            return self._name_to_id[name]
        except KeyError:
            raise GroupError(f"unknown element name {name!r}") from None

    def name_of(self, eid: int) -> str:
        self._check(eid)
        return self.elements[eid].name

    def _check(self, eid: int):
        if not (isinstance(eid, (int,)) and 0 <= eid < self.order):
            raise GroupError(f"element id {eid!r} out of range [0, {self.order})")

    def compose(self, a: int, b: int) -> int:
        """a acted on by b (table lookup)."""
        self._check(a)
        self._check(b)
        return self.cayley.lookup(a, b)

    def inverse(self, a: int) -> int:
        self._check(a)
        for b in range(self.order):
            if self.cayley.lookup(a, b) == self.identity and self.cayley.lookup(b, a) == self.identity:
                return b
        raise GroupError(f"element {a} has no two-sided inverse")  # pragma: no cover

    def element_order(self, a: int) -> int:
        self._check(a)
        acc = a
        m = 1
        while acc != self.identity:
            acc = self.cayley.lookup(acc, a)
            m += 1
            if m > self.order:  # pragma: no cover - impossible for valid groups
                raise GroupError(f"element {a} does not reach identity")
        return m

    def manifest(self) -> dict:
        """Self-describing text form: names in id order + table of names."""
        return {
            "elements": [e.name for e in self.elements],
            "identity": self.elements[self.identity].name,
            "table": [
                [self.elements[v].name for v in row] for row in self.cayley.table
            ],
        }

    @classmethod
    def from_manifest(cls, m: dict) -> "GroupSpec":
        names = list(m["elements"])
        idx = {n: i for i, n in enumerate(names)}
        table = tuple(tuple(idx[v] for v in row) for row in m["table"])
        return cls(
            elements=tuple(GroupElement(i, n) for i, n in enumerate(names)),
            identity=idx[m["identity"]],
            cayley=CayleyTable(len(names), table),
        )


def _perm_mul(a: tuple, b: tuple) -> tuple:
    """Apply a, then b (state-then-action order)."""
    return tuple(b[a[i]] for i in range(len(a)))


def _dihedral_perms(k: int):
    """All 2k symmetries of a regular k-gon as vertex permutations.

    Returns (rotations, reflections); rotations[0] is the identity.
    """
    base = tuple(range(k))
    rotations = []
    for r in range(k):
        rotations.append(tuple((i + r) % k for i in base))
    reflections = []
    for r in range(k):
        # reflect (i -> -i) then rotate by r
        reflections.append(tuple((r - i) % k for i in base))
    return rotations, reflections


def _bind_d3_names(rotations, reflections):
    """Assign the canonical D3 names to the triangle permutations.

    The name binding is pinned by the worked flip-flop compositions:
    spin . reflect = mirror and rotate . mirror = reflect, with rotate/spin
    the mutually inverse 3-cycles and flip/reflect/mirror the involutions.
    Searches all assignments and fails loudly if none satisfies the facts.
    """
    identity = rotations[0]
    cycles = rotations[1:]
    for rot, spn in itertools.permutations(cycles, 2):
        if _perm_mul(rot, spn) != identity:
            continue
        for flp, refl, mirr in itertools.permutations(reflections, 3):
            if _perm_mul(spn, refl) != mirr:
                continue
            if _perm_mul(rot, mirr) != refl:
                continue
            return {
                "val": identity,
                "rotate": rot,
                "spin": spn,
                "flip": flp,
                "reflect": refl,
                "mirror": mirr,
            }
    raise GroupError("no D3 name binding satisfies the flip-flop composition facts")


def build_dihedral(k: int) -> GroupSpec:
    """Dihedral group of the regular k-gon (order 2k) from vertex permutations.

    For k=3 the six elements carry the canonical flip-flop names; for other k
    they are named e, r1..r{k-1}, s0..s{k-1}.
    """
    if not isinstance(k, int) or k < 3:
        # k=2 has no faithful action on its polygon vertices, so the
        # permutation construction below would not yield 2k distinct elements
        raise GroupError(f"dihedral order parameter must be an integer >= 3, got {k!r}")
    rotations, reflections = _dihedral_perms(k)
    if k == 3:
        bound = _bind_d3_names(rotations, reflections)
        named = [(name, bound[name]) for name in D3_NAMES]
    else:
        named = [("e", rotations[0])]
        named += [(f"r{i}", p) for i, p in enumerate(rotations[1:], start=1)]
        named += [(f"s{i}", p) for i, p in enumerate(reflections)]
    perms = [p for _, p in named]
    index = {p: i for i, p in enumerate(perms)}
    n = len(perms)
    table = tuple(
        tuple(index[_perm_mul(perms[a], perms[b])] for b in range(n)) for a in range(n)
    )
    spec = GroupSpec(
        elements=tuple(GroupElement(i, name) for i, (name, _) in enumerate(named)),
        identity=0,
        cayley=CayleyTable(n, table),
    )
    violations = validate_group(spec)
    if violations:  # pragma: no cover - constructor guarantees axioms
        raise GroupError(f"constructed table violates group axioms: {violations}")
    return spec


def validate_group(g: GroupSpec) -> list:
    """Check closure, Latin-square structure, associativity, identity, inverses.

    Returns a list of human-readable violation strings; empty means valid.
    Exhaustive, so intended for small groups (n <= 16).
    """
    n = g.order
    t = g.cayley.table
    out = []
    for a in range(n):
        for b in range(n):
            v = t[a][b]
            if not (0 <= v < n):
                out.append(f"closure: {a}*{b} = {v} outside [0,{n})")
    if out:
        return out
    for a in range(n):
        if sorted(t[a]) != list(range(n)):
            out.append(f"latin-square: row {a} is not a permutation")
        col = sorted(t[b][a] for b in range(n))
        if col != list(range(n)):
            out.append(f"latin-square: column {a} is not a permutation")
    for a in range(n):
        if t[g.identity][a] != a or t[a][g.identity] != a:
            out.append(f"identity: element {g.identity} does not fix {a}")
    for a in range(n):
        if not any(
            t[a][b] == g.identity and t[b][a] == g.identity for b in range(n)
        ):
            out.append(f"inverse: element {a} has no two-sided inverse")
    for a in range(n):
        for b in range(n):
            for c in range(n):
                if t[t[a][b]][c] != t[a][t[b][c]]:
                    out.append(f"associativity: ({a}*{b})*{c} != {a}*({b}*{c})")
    return out


# Module-level functional aliases matching the operation names used elsewhere.
def compose(g: GroupSpec, a: int, b: int) -> int:
    return g.compose(a, b)


def inverse(g: GroupSpec, a: int) -> int:
    return g.inverse(a)


def element_order(g: GroupSpec, a: int) -> int:
    return g.element_order(a)
