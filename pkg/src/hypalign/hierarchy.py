"""Class trees and forests.

Hierarchy files hold one ``child<TAB>parent`` edge per line.  ``#`` starts a
comment line; a forest file separates trees with ``== tree <name> ==``.
Leaves are the nodes that never occur as a parent.

Levels count upwards: 0 holds the leaves, ``L`` the top band (every root).  A
ragged tree is padded by repeating short leaves as their own pass-through
superclasses until every leaf-to-root path has ``L`` edges.  Within each level
classes are indexed by lexicographic name order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

_TREE_HEADER = re.compile(r"^==\s*tree\s+(.*?)\s*==\s*$")

Node = tuple[int, int]  # (level, class index)


class HierarchyError(ValueError):
    pass


@dataclass(frozen=True)
class NegativeSets:
    below: tuple[int, ...]
    above: tuple[int, ...]


class HierarchyTree:
    """An immutable class tree with per-level dense class indices.

    ``parents`` maps every non-root node ``(level, index)`` to its parent node.
    Before padding a parent may sit more than one level up.
    """

    def __init__(self, name: str, levels: list[list[str]], parents: dict[Node, Node]):
        self.name = name
        self.levels: tuple[tuple[str, ...], ...] = tuple(tuple(names) for names in levels)
        self.parents: dict[Node, Node] = dict(parents)
        self._index = [{n: i for i, n in enumerate(names)} for names in self.levels]

    @classmethod
    def from_edges(cls, name: str, edges: list[tuple[str, str]]) -> "HierarchyTree":
        if not edges:
            raise HierarchyError(f"tree {name!r} has no edges")
        parent_of: dict[str, str] = {}
        for child, parent in edges:
            if child == parent:
                raise HierarchyError(f"cycle: {child!r} is its own parent")
            known = parent_of.get(child)
            if known is not None and known != parent:
                raise HierarchyError(f"node {child!r} has two parents: {known!r} and {parent!r}")
            parent_of[child] = parent
        nodes = set(parent_of) | set(parent_of.values())
        depth: dict[str, int] = {}
        for start in sorted(nodes):
            path = []
            node = start
            seen = set()
            while node in parent_of and node not in depth:
                if node in seen:
                    raise HierarchyError(f"cycle through {node!r}")
                seen.add(node)
                path.append(node)
                node = parent_of[node]
            base = depth.get(node, 0)
            if node not in depth:
                depth[node] = 0
            for k, n in enumerate(reversed(path), start=1):
                depth[n] = base + k
        parents_set = set(parent_of.values())
        leaves = nodes - parents_set
        L = max(depth[n] for n in leaves)

        def level(n: str) -> int:
            return 0 if n in leaves else L - depth[n]

        by_level: list[list[str]] = [[] for _ in range(L + 1)]
        for n in nodes:
            by_level[level(n)].append(n)
        for names in by_level:
            names.sort()
        index = [{n: i for i, n in enumerate(names)} for names in by_level]
        parents = {}
        for child, parent in parent_of.items():
            lc, lp = level(child), level(parent)
            parents[(lc, index[lc][child])] = (lp, index[lp][parent])
        return cls(name, by_level, parents)

    # -- structure -----------------------------------------------------
    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def num_classes(self, level: int) -> int:
        return len(self.levels[level])

    @property
    def num_nodes(self) -> int:
        return sum(len(names) for names in self.levels)

    @property
    def leaves(self) -> tuple[str, ...]:
        return self.levels[0]

    @property
    def is_uniform(self) -> bool:
        return all(p[0] == c[0] + 1 for c, p in self.parents.items()) and all(
            (l, c) in self.parents for l in range(self.depth) for c in range(self.num_classes(l))
        )

    def name_of(self, level: int, index: int) -> str:
        return self.levels[level][index]

    def index_of(self, level: int, name: str) -> int:
        try:
            return self._index[level][name]
        except (IndexError, KeyError):
            raise HierarchyError(f"no class {name!r} at level {level}") from None

    def _check(self, level: int, index: int) -> None:
        if not 0 <= level <= self.depth or not 0 <= index < self.num_classes(level):
            raise HierarchyError(f"class ({level}, {index}) out of range")

    def parent(self, level: int, index: int) -> int | None:
        self._check(level, index)
        p = self.parents.get((level, index))
        return None if p is None else p[1]

    def children(self, level: int, index: int) -> tuple[int, ...]:
        self._check(level, index)
        return tuple(sorted(c for (cl, c), p in self.parents.items() if p == (level, index) and cl == level - 1))

    def _require_uniform(self) -> None:
        if not self.is_uniform:
            raise HierarchyError(f"tree {self.name!r} is not of uniform depth; pad it first")

    # -- dense index arrays used by the losses --------------------------
    @cached_property
    def parent_index(self) -> tuple[np.ndarray, ...]:
        """``parent_index[l][c]``: class index at level l+1 of the parent of (l, c)."""
        self._require_uniform()
        return tuple(
            np.array([self.parents[(l, c)][1] for c in range(self.num_classes(l))], dtype=np.int64)
            for l in range(self.depth)
        )

    @cached_property
    def leaf_ancestors(self) -> np.ndarray:
        """(C_0, L+1) matrix; column l is the level-l ancestor of each leaf."""
        self._require_uniform()
        out = np.zeros((self.num_classes(0), self.depth + 1), dtype=np.int64)
        out[:, 0] = np.arange(self.num_classes(0))
        for l in range(self.depth):
            out[:, l + 1] = self.parent_index[l][out[:, l]]
        return out

    @cached_property
    def upper_negative_mask(self) -> tuple[np.ndarray, ...]:
        """``[l]`` is a (C_l, C_{l+1}) mask of classes one level up not joined by an edge."""
        masks = []
        for l in range(self.depth):
            m = np.ones((self.num_classes(l), self.num_classes(l + 1)), dtype=bool)
            m[np.arange(self.num_classes(l)), self.parent_index[l]] = False
            masks.append(m)
        return tuple(masks)

    @cached_property
    def lower_negative_mask(self) -> tuple[np.ndarray | None, ...]:
        """``[l]`` is a (C_l, C_{l-1}) mask of classes one level down not joined by an edge."""
        return (None,) + tuple(m.T.copy() for m in self.upper_negative_mask)

    # -- queries ---------------------------------------------------------
    def ancestor_path(self, leaf: int | str) -> list[Node]:
        """Nodes from the leaf (level 0) up to its root (level L)."""
        self._require_uniform()
        c = self.index_of(0, leaf) if isinstance(leaf, str) else leaf
        self._check(0, c)
        return [(l, int(a)) for l, a in enumerate(self.leaf_ancestors[c])]

    def negative_sets(self, level: int, index: int) -> NegativeSets:
        self._require_uniform()
        self._check(level, index)
        below: tuple[int, ...] = ()
        above: tuple[int, ...] = ()
        if level > 0:
            below = tuple(int(i) for i in np.flatnonzero(self.lower_negative_mask[level][index]))
        if level < self.depth:
            above = tuple(int(i) for i in np.flatnonzero(self.upper_negative_mask[level][index]))
        return NegativeSets(below=below, above=above)

    def to_text(self) -> str:
        lines = [f"== tree {self.name} =="]
        for l in range(self.depth + 1):
            for c in range(self.num_classes(l)):
                p = self.parents.get((l, c))
                # pass-through padding repeats the child's name; dropping those edges
                # leaves the original edge, which re-pads identically on parse
                if p is not None and self.levels[l][c] != self.levels[p[0]][p[1]]:
                    lines.append(f"{self.levels[l][c]}\t{self.levels[p[0]][p[1]]}")
        return "\n".join(lines) + "\n"

    def __repr__(self) -> str:
        sizes = "-".join(str(len(n)) for n in reversed(self.levels))
        return f"HierarchyTree({self.name!r}, L={self.depth}, classes={sizes})"


def pad_to_uniform_depth(tree: HierarchyTree) -> HierarchyTree:
    """Insert pass-through copies of short leaves so every path has ``L`` edges."""
    if tree.is_uniform:
        return tree
    L = tree.depth
    levels = [list(names) for names in tree.levels]
    named_parents: dict[tuple[int, str], tuple[int, str]] = {}
    for (cl, c), (pl, p) in tree.parents.items():
        named_parents[(cl, tree.name_of(cl, c))] = (pl, tree.name_of(pl, p))
    for (cl, cname), (pl, pname) in list(named_parents.items()):
        if cl != 0 or pl == 1:
            continue
        below = (0, cname)
        for l in range(1, pl):
            levels[l].append(cname)
            named_parents[below] = (l, cname)
            below = (l, cname)
        named_parents[below] = (pl, pname)
    for names in levels:
        names.sort()
    index = [{n: i for i, n in enumerate(names)} for names in levels]
    parents = {(cl, index[cl][cn]): (pl, index[pl][pn]) for (cl, cn), (pl, pn) in named_parents.items()}
    padded = HierarchyTree(tree.name, levels, parents)
    assert padded.depth == L and padded.is_uniform
    return padded


def level_weight(level: int, depth: int) -> float:
    """Linear level weight ``1 - l/(L+1)``."""
    if not 0 <= level <= depth:
        raise ValueError(f"level {level} outside 0..{depth}")
    return 1.0 - level / (depth + 1)


def level_weights(depth: int, weighting: str = "linear") -> np.ndarray:
    if weighting == "linear":
        return np.array([level_weight(l, depth) for l in range(depth + 1)])
    if weighting == "equal":
        return np.ones(depth + 1)
    raise ValueError(f"unknown weighting {weighting!r}")


@dataclass(frozen=True)
class HierarchyForest:
    trees: tuple[HierarchyTree, ...]

    def __post_init__(self):
        if not self.trees:
            raise HierarchyError("a forest needs at least one tree")
        leaves = self.trees[0].leaves
        for t in self.trees[1:]:
            if t.leaves != leaves:
                raise HierarchyError(f"tree {t.name!r} does not share the leaf set of {self.trees[0].name!r}")

    @property
    def leaves(self) -> tuple[str, ...]:
        return self.trees[0].leaves

    def leaf_index(self, name: str) -> int:
        return self.trees[0].index_of(0, name)

    def __len__(self) -> int:
        return len(self.trees)

    def __iter__(self):
        return iter(self.trees)

    def __getitem__(self, i: int) -> HierarchyTree:
        return self.trees[i]

    def to_text(self) -> str:
        return "".join(t.to_text() for t in self.trees)


def parse_forest(text: str) -> HierarchyForest:
    """Parse hierarchy file content into a validated, padded forest."""
    sections: list[tuple[str, list[tuple[str, str]]]] = []
    current: list[tuple[str, str]] | None = None
    seen: set[tuple[str, str]] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        header = _TREE_HEADER.match(line)
        if header:
            current, seen = [], set()
            sections.append((header.group(1) or f"tree{len(sections)}", current))
            continue
        parts = raw.rstrip("\r\n").split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise HierarchyError(f"line {lineno}: expected 'child<TAB>parent', got {raw!r}")
        if current is None:
            current = []
            sections.append(("tree0", current))
        edge = (parts[0].strip(), parts[1].strip())
        if edge not in seen:
            seen.add(edge)
            current.append(edge)
    if not sections:
        raise HierarchyError("hierarchy file contains no edges")
    trees = tuple(pad_to_uniform_depth(HierarchyTree.from_edges(name, edges)) for name, edges in sections)
    return HierarchyForest(trees)


def load_forest(path) -> HierarchyForest:
    with open(path, encoding="utf-8") as fh:
        return parse_forest(fh.read())
