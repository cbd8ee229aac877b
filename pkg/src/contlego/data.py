"""Sequence-task data: experiences, chain sampling, tokenization, dataset files.

A task example is a chain of clauses ``a_1 = x_1``, ``a_t = a_{t-1} . x_t``
over a finite group; the model must resolve every symbol ``a_t`` to its group
element.  Clauses are shown in a shuffled order.  Experiences restrict the
chain to a subset of elements and relations (the continual-learning phases).
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field, replace

import numpy as np

from .groups import GroupSpec, GroupError

__all__ = [
    "DataError",
    "VocabSpec",
    "ExperienceSpec",
    "Clause",
    "LegoSequence",
    "TokenizedExample",
    "Dataset",
    "default_vocab",
    "make_flipflop_experiences",
    "make_compositional_experiences",
    "make_full_experience",
    "make_incremental_experiences",
    "build_sequence",
    "sample_sequence",
    "shuffle_presentation",
    "tokenize",
    "detokenize",
    "oracle_solve",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
]

ASSIGN = "="
APPLY = "∘"
SEP = ";"
PAD = "<pad>"

LABEL_IGNORE = -1

DATASET_FORMAT = "contlego.dataset.v1"


class DataError(ValueError):
    """Invalid task data construction or lookup."""


@dataclass(frozen=True)
class VocabSpec:
    """Token table: structural tokens, group element tokens, symbol tokens."""

    element_tokens: tuple
    symbol_tokens: tuple
    token_to_id: dict = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        toks = self.all_tokens()
        if len(set(toks)) != len(toks):
            raise DataError("vocabulary tokens must be unique")
        object.__setattr__(self, "token_to_id", {t: i for i, t in enumerate(toks)})

    def all_tokens(self) -> tuple:
        return (PAD, ASSIGN, APPLY, SEP) + self.element_tokens + self.symbol_tokens

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    @property
    def pad_id(self) -> int:
        return self.token_to_id[PAD]

    def id_of(self, token: str) -> int:
        try:
            return self.token_to_id[token]
        except KeyError:
            raise DataError(f"token {token!r} not in vocabulary") from None

    def token_of(self, tid: int) -> str:
        toks = self.all_tokens()
        if not 0 <= tid < len(toks):
            raise DataError(f"token id {tid} out of range")
        return toks[tid]


def default_vocab(group: GroupSpec, num_symbols: int = 26) -> VocabSpec:
    """Element tokens from the group plus single-letter symbols a, b, c, ..."""
    if num_symbols > 26:
        raise DataError("at most 26 single-letter symbols supported")
    return VocabSpec(
        element_tokens=tuple(e.name for e in group.elements),
        symbol_tokens=tuple(string.ascii_lowercase[:num_symbols]),
    )


@dataclass(frozen=True)
class ExperienceSpec:
    """A restriction of the chain task to a subset of states and moves.

    ``relations`` always contains the group identity.  A relation is valid at
    a state only if it keeps the chain inside ``elements``; for the flip-flop
    experiences every relation is valid at every state, while stitched/full
    experiences are only closed state-by-state.
    """

    name: str
    elements: tuple  # sorted element ids
    relations: tuple  # sorted element ids, includes identity
    group: GroupSpec = field(compare=False)

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(sorted(set(self.elements))))
        object.__setattr__(self, "relations", tuple(sorted(set(self.relations))))
        if self.group.identity not in self.relations:
            raise DataError(f"experience {self.name!r}: relations must include the identity")
        for e in self.elements:
            self.group._check(e)
        for r in self.relations:
            self.group._check(r)
        if not self._strongly_connected():
            raise DataError(
                f"experience {self.name!r}: elements are not mutually reachable "
                f"under the valid relations"
            )

    def valid_relations(self, state: int) -> tuple:
        return tuple(r for r in self.relations if self.group.compose(state, r) in self.elements)

    @property
    def strictly_closed(self) -> bool:
        return all(
            self.group.compose(e, r) in self.elements
            for e in self.elements
            for r in self.relations
        )

    def _strongly_connected(self) -> bool:
        elems = set(self.elements)
        if not elems:
            return False

        def reach(start, forward=True):
            seen = {start}
            stack = [start]
            edges = {
                e: [self.group.compose(e, r) for r in self.valid_relations(e)]
                for e in elems
            }
            if not forward:
                rev = {e: [] for e in elems}
                for a, outs in edges.items():
                    for b in outs:
                        rev[b].append(a)
                edges = rev
            while stack:
                cur = stack.pop()
                for nxt in edges[cur]:
                    if nxt not in seen:
                        seen.add(nxt)
                        stack.append(nxt)
            return seen

        start = self.elements[0]
        return reach(start, True) == elems and reach(start, False) == elems

    def element_names(self) -> tuple:
        return tuple(self.group.name_of(e) for e in self.elements)

    def relation_names(self) -> tuple:
        return tuple(self.group.name_of(r) for r in self.relations)

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "elements": list(self.element_names()),
            "relations": list(self.relation_names()),
        }


@dataclass(frozen=True)
class Clause:
    """One chain unit; the first clause binds a literal element."""

    lhs_symbol: str
    rhs_literal: int | None  # element id for the opening clause, else None
    rhs_prev_symbol: str | None
    rhs_relation: int | None  # element id of the applied relation
    resolved_value: int

    @property
    def is_opening(self) -> bool:
        return self.rhs_literal is not None


@dataclass(frozen=True)
class LegoSequence:
    group: GroupSpec = field(compare=False)
    clauses: tuple  # canonical order
    presentation_order: tuple  # permutation of range(T)

    def __post_init__(self):
        T = len(self.clauses)
        if sorted(self.presentation_order) != list(range(T)):
            raise DataError("presentation_order must be a permutation of clause indices")
        syms = [c.lhs_symbol for c in self.clauses]
        if len(set(syms)) != T:
            raise DataError("lhs symbols must be distinct within a sequence")
        if T and not self.clauses[0].is_opening:
            raise DataError("first clause must bind a literal element")

    @property
    def length(self) -> int:
        return len(self.clauses)

    @property
    def symbols(self) -> tuple:
        return tuple(c.lhs_symbol for c in self.clauses)

    @property
    def targets(self) -> tuple:
        return tuple(c.resolved_value for c in self.clauses)


def _canonical_flipflop_group(g: GroupSpec) -> None:
    expected = {"val", "rotate", "spin", "flip", "reflect", "mirror"}
    if {e.name for e in g.elements} != expected:
        raise DataError("group does not carry the canonical triangle-symmetry names")


def make_flipflop_experiences(g: GroupSpec) -> list:
    """The three two-state/one-involution experiences over the triangle group."""
    _canonical_flipflop_group(g)
    i = g.id_of
    specs = [
        ("flipflop-1", ("spin", "mirror"), ("val", "reflect")),
        ("flipflop-2", ("rotate", "reflect"), ("val", "mirror")),
        ("flipflop-3", ("val", "flip"), ("val", "flip")),
    ]
    return [
        ExperienceSpec(
            name=name,
            elements=tuple(i(e) for e in elems),
            relations=tuple(i(r) for r in rels),
            group=g,
        )
        for name, elems, rels in specs
    ]


def _flipflop_candidates(g: GroupSpec):
    """All 2-element experiences {a, b} linked both ways by one involution."""
    out = []
    for a in range(g.order):
        for b in range(a + 1, g.order):
            for r in range(g.order):
                if r == g.identity or g.element_order(r) != 2:
                    continue
                if g.compose(a, r) == b and g.compose(b, r) == a:
                    out.append(((a, b), r))
    return out


def make_compositional_experiences(g: GroupSpec, base: ExperienceSpec | None = None) -> list:
    """Two single-cycle experiences whose element sets overlap in one element.

    The first defaults to flip-flop experience 1.  The second is found by
    search over (element pair, involution) candidates; ties are broken by
    preferring a partner whose tokens are disjoint from the first experience
    apart from the single shared element (no identity state, no reuse of the
    first experience's relation or elements), then by smallest ids.
    """
    _canonical_flipflop_group(g)
    if base is None:
        base = make_flipflop_experiences(g)[0]
    base_elems = set(base.elements)
    base_rels = set(base.relations) - {g.identity}
    scored = []
    for (a, b), r in _flipflop_candidates(g):
        pair = {a, b}
        if len(pair & base_elems) != 1:
            continue
        clean = (
            g.identity not in pair
            and not (pair & base_rels)
            and r not in base_elems
            and r not in base_rels
        )
        scored.append((not clean, min(pair), max(pair), r, (a, b)))
    if not scored:
        raise DataError("no overlapping single-cycle partner experience exists")
    scored.sort()
    _, _, _, rel, pair = scored[0]
    partner = ExperienceSpec(
        name="compositional-2",
        elements=pair,
        relations=(g.identity, rel),
        group=g,
    )
    first = replace(base, name="compositional-1")
    return [first, partner]


def make_full_experience(compositional: list) -> ExperienceSpec:
    """Union task: all elements of the parts, relations enough to move between them."""
    if not compositional:
        raise DataError("need at least one compositional experience")
    g = compositional[0].group
    elements = tuple(sorted(set().union(*(set(e.elements) for e in compositional))))
    relations = set().union(*(set(e.relations) for e in compositional))
    relations.add(g.identity)
    try:
        return ExperienceSpec(
            name="full",
            elements=elements,
            relations=tuple(sorted(relations)),
            group=g,
        )
    except DataError:
        pass
    # The parts' relations do not connect the union; search completions.
    for extra in range(g.order):
        cand = tuple(sorted(relations | {extra}))
        try:
            return ExperienceSpec(name="full", elements=elements, relations=cand, group=g)
        except DataError:
            continue
    raise DataError("element union admits no relation completion that connects it")


def make_incremental_experiences(compositional: list, full: ExperienceSpec) -> list:
    """Stitched schedule: first part, growing unions of parts seen so far, full task."""
    if not compositional:
        raise DataError("need at least one compositional experience")
    g = compositional[0].group
    out = [compositional[0]]
    for k in range(2, len(compositional) + 1):
        parts = compositional[:k]
        elements = tuple(sorted(set().union(*(set(e.elements) for e in parts))))
        relations = tuple(sorted(set().union(*(set(e.relations) for e in parts))))
        out.append(
            ExperienceSpec(
                name=f"incremental-{k}",
                elements=elements,
                relations=relations,
                group=g,
            )
        )
    out.append(full)
    return out


def build_sequence(
    exp: ExperienceSpec,
    start: int,
    relations: list,
    symbols: list,
    presentation_order: tuple | None = None,
) -> LegoSequence:
    """Construct a sequence from explicit draws (start element, relation chain)."""
    g = exp.group
    T = 1 + len(relations)
    if len(symbols) != T or len(set(symbols)) != T:
        raise DataError(f"need {T} distinct symbols, got {symbols!r}")
    if start not in exp.elements:
        raise DataError(f"start element {start} not in experience {exp.name!r}")
    clauses = [Clause(symbols[0], start, None, None, start)]
    value = start
    for t, r in enumerate(relations, start=1):
        if r not in exp.relations:
            raise DataError(f"relation {r} not in experience {exp.name!r}")
        value = g.compose(value, r)
        if value not in exp.elements:
            raise DataError(f"chain left the experience element set at step {t}")
        clauses.append(Clause(symbols[t], None, symbols[t - 1], r, value))
    if presentation_order is None:
        presentation_order = tuple(range(T))
    return LegoSequence(group=g, clauses=tuple(clauses), presentation_order=presentation_order)


def sample_sequence(exp: ExperienceSpec, T: int, rng: np.random.Generator, vocab: VocabSpec) -> LegoSequence:
    """Random chain: uniform start element, then uniform valid relation per step."""
    if T < 1:
        raise DataError("sequence length must be >= 1")
    if T >= len(vocab.symbol_tokens) + 1:
        raise DataError(
            f"insufficient symbols: need {T} distinct, library has {len(vocab.symbol_tokens)}"
        )
    symbols = [vocab.symbol_tokens[i] for i in rng.choice(len(vocab.symbol_tokens), size=T, replace=False)]
    start = int(exp.elements[rng.integers(len(exp.elements))])
    relations = []
    state = start
    for _ in range(T - 1):
        valid = exp.valid_relations(state)
        r = int(valid[rng.integers(len(valid))])
        relations.append(r)
        state = exp.group.compose(state, r)
    return build_sequence(exp, start, relations, symbols)


def shuffle_presentation(seq: LegoSequence, rng: np.random.Generator) -> LegoSequence:
    """Uniformly random clause presentation order; targets unchanged."""
    perm = tuple(int(i) for i in rng.permutation(seq.length))
    return replace(seq, presentation_order=perm)


def oracle_solve(seq: LegoSequence) -> list:
    """Re-derive every target by literal clause interpretation in canonical order."""
    g = seq.group
    env = {}
    out = []
    for clause in seq.clauses:
        if clause.is_opening:
            value = clause.rhs_literal
        else:
            if clause.rhs_prev_symbol not in env:
                raise DataError(
                    f"clause {clause.lhs_symbol!r} references unresolved "
                    f"symbol {clause.rhs_prev_symbol!r}"
                )
            value = g.compose(env[clause.rhs_prev_symbol], clause.rhs_relation)
        env[clause.lhs_symbol] = value
        out.append(value)
    return out


@dataclass(frozen=True)
class TokenizedExample:
    """Flat token view of one sequence, in presentation order.

    ``labels`` holds the target element id at each clause's leading symbol
    position and LABEL_IGNORE elsewhere.  ``clause_index`` maps each token to
    its canonical clause (0-based); ``canonical_positions`` lists, per
    presentation slot, the canonical clause shown there.
    """

    token_ids: tuple
    labels: tuple
    clause_index: tuple
    canonical_positions: tuple

    @property
    def num_clauses(self) -> int:
        return len(self.canonical_positions)


def tokenize(seq: LegoSequence, vocab: VocabSpec) -> TokenizedExample:
    """Emit clauses in presentation order, separated by SEP.

    Opening clause: [sym, =, elem]; later clauses: [sym, =, prev_sym, APPLY, rel].
    """
    g = seq.group
    ids, labels, cidx = [], [], []
    for slot, c in enumerate(seq.presentation_order):
        clause = seq.clauses[c]
        if slot > 0:
            ids.append(vocab.id_of(SEP))
            labels.append(LABEL_IGNORE)
            cidx.append(seq.presentation_order[slot - 1])
        if clause.is_opening:
            toks = [clause.lhs_symbol, ASSIGN, g.name_of(clause.rhs_literal)]
        else:
            toks = [
                clause.lhs_symbol,
                ASSIGN,
                clause.rhs_prev_symbol,
                APPLY,
                g.name_of(clause.rhs_relation),
            ]
        for j, t in enumerate(toks):
            ids.append(vocab.id_of(t))
            labels.append(clause.resolved_value if j == 0 else LABEL_IGNORE)
            cidx.append(c)
    return TokenizedExample(
        token_ids=tuple(ids),
        labels=tuple(labels),
        clause_index=tuple(cidx),
        canonical_positions=tuple(seq.presentation_order),
    )


def token_count(T: int) -> int:
    """Tokens for a T-clause example: 3 + 5(T-1) clause tokens + (T-1) separators."""
    return 3 + 5 * (T - 1) + (T - 1)


def detokenize(ex: TokenizedExample, vocab: VocabSpec, group: GroupSpec) -> LegoSequence:
    """Rebuild the clause structure from tokens (round-trip check for tokenize)."""
    toks = [vocab.token_of(t) for t in ex.token_ids]
    chunks, cur = [], []
    for t in toks:
        if t == SEP:
            chunks.append(cur)
            cur = []
        else:
            cur.append(t)
    chunks.append(cur)
    if len(chunks) != ex.num_clauses:
        raise DataError("separator structure does not match clause count")
    labels_at_sym = [l for l in ex.labels if l != LABEL_IGNORE]
    parsed = {}
    for chunk, canon, label in zip(chunks, ex.canonical_positions, labels_at_sym):
        if len(chunk) == 3:
            sym, eq, lit = chunk
            if eq != ASSIGN:
                raise DataError(f"malformed opening clause {chunk!r}")
            parsed[canon] = Clause(sym, group.id_of(lit), None, None, label)
        elif len(chunk) == 5:
            sym, eq, prev, op, rel = chunk
            if eq != ASSIGN or op != APPLY:
                raise DataError(f"malformed clause {chunk!r}")
            parsed[canon] = Clause(sym, None, prev, group.id_of(rel), label)
        else:
            raise DataError(f"clause chunk of unexpected width: {chunk!r}")
    clauses = tuple(parsed[t] for t in range(len(parsed)))
    return LegoSequence(group=group, clauses=clauses, presentation_order=ex.canonical_positions)


@dataclass
class Dataset:
    """A generated set of tokenized examples plus its provenance header."""

    experience: ExperienceSpec
    vocab: VocabSpec
    seed: int
    T: int
    examples: list  # list of TokenizedExample
    sequences: list  # matching list of LegoSequence

    def __len__(self):
        return len(self.examples)

    def arrays(self):
        """Dense int32 views for batching: tokens, labels, canonical positions."""
        tokens = np.array([e.token_ids for e in self.examples], dtype=np.int32)
        labels = np.array([e.labels for e in self.examples], dtype=np.int32)
        canon = np.array([e.canonical_positions for e in self.examples], dtype=np.int32)
        return tokens, labels, canon


def generate_dataset(
    exp: ExperienceSpec,
    n: int,
    T: int,
    seed: int,
    vocab: VocabSpec | None = None,
) -> Dataset:
    """n independent shuffled examples; example i uses substream (seed, i)."""
    if n < 1:
        raise DataError("dataset size must be >= 1")
    if vocab is None:
        vocab = default_vocab(exp.group)
    examples, sequences = [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        seq = shuffle_presentation(sample_sequence(exp, T, rng, vocab), rng)
        sequences.append(seq)
        examples.append(tokenize(seq, vocab))
    return Dataset(experience=exp, vocab=vocab, seed=seed, T=T, examples=examples, sequences=sequences)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_dataset(ds: Dataset, path) -> None:
    """Line-oriented file: one header line, then one record per example."""
    header = {
        "format": DATASET_FORMAT,
        "experience": ds.experience.manifest(),
        "group": ds.experience.group.manifest(),
        "vocab": {
            "elements": list(ds.vocab.element_tokens),
            "symbols": list(ds.vocab.symbol_tokens),
        },
        "seed": ds.seed,
        "T": ds.T,
        "n": len(ds),
    }
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(_dumps(header) + "\n")
            for i, (seq, ex) in enumerate(zip(ds.sequences, ds.examples)):
                rec = {
                    "id": i,
                    "experience": ds.experience.name,
                    "seed": ds.seed,
                    "clauses": _clause_names(seq),
                    "presentation": list(seq.presentation_order),
                    "tokens": list(ex.token_ids),
                    "labels": list(ex.labels),
                }
                f.write(_dumps(rec) + "\n")
    except OSError as e:
        raise DataError(f"failed to write dataset to {path}: {e}") from e


def _clause_names(seq: LegoSequence) -> list:
    g = seq.group
    out = []
    for c in seq.clauses:
        if c.is_opening:
            out.append([c.lhs_symbol, g.name_of(c.rhs_literal)])
        else:
            out.append([c.lhs_symbol, c.rhs_prev_symbol, g.name_of(c.rhs_relation)])
    return out


def read_dataset(path) -> Dataset:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise DataError(f"failed to read dataset from {path}: {e}") from e
    if not lines:
        raise DataError(f"empty dataset file: {path}")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT:
        raise DataError(f"unrecognized dataset format in {path}")
    group = GroupSpec.from_manifest(header["group"])
    exp = ExperienceSpec(
        name=header["experience"]["name"],
        elements=tuple(group.id_of(e) for e in header["experience"]["elements"]),
        relations=tuple(group.id_of(r) for r in header["experience"]["relations"]),
        group=group,
    )
    vocab = VocabSpec(
        element_tokens=tuple(header["vocab"]["elements"]),
        symbol_tokens=tuple(header["vocab"]["symbols"]),
    )
    examples, sequences = [], []
    for line in lines[1:]:
        rec = json.loads(line)
        clauses = []
        value = None
        for t, cn in enumerate(rec["clauses"]):
            if t == 0:
                sym, lit = cn
                value = group.id_of(lit)
                clauses.append(Clause(sym, value, None, None, value))
            else:
                sym, prev, rel = cn
                value = group.compose(value, group.id_of(rel))
                clauses.append(Clause(sym, None, prev, group.id_of(rel), value))
        seq = LegoSequence(
            group=group, clauses=tuple(clauses), presentation_order=tuple(rec["presentation"])
        )
        sequences.append(seq)
        examples.append(
            TokenizedExample(
                token_ids=tuple(rec["tokens"]),
                labels=tuple(rec["labels"]),
                clause_index=tokenize(seq, vocab).clause_index,
                canonical_positions=tuple(rec["presentation"]),
            )
        )
    return Dataset(
        experience=exp,
        vocab=vocab,
        seed=header["seed"],
        T=header["T"],
        examples=examples,
        sequences=sequences,
    )
