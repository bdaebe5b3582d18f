"""Genetic-programming symbolic regression over correction tables.

Expressions are trees over {+, -, *, /} and unary negation, with variable
leaves named after table columns and numeric constants.  Each target column
gets an independent search whose result is a Pareto front over (complexity,
mse).  Division is protected: any row driving a denominator below 1e-12
poisons the candidate's fitness rather than producing infinities.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from . import reduction, ude
from .errors import EmptyFront, EngineerDecisionPending, InvalidModel, UnresolvedReference

DIV_EPS = 1e-12
BINARY_OPS = ("+", "-", "*", "/")
UNARY_OPS = ("neg",)


@dataclass(frozen=True)
class ExpressionTree:
    kind: str                       # "const" | "var" | "op"
    value: float = 0.0
    name: str = ""
    op: str = ""
    args: tuple["ExpressionTree", ...] = ()

    @property
    def complexity(self) -> int:
        if self.kind != "op":
            return 1
        return 1 + sum(a.complexity for a in self.args)

    def __str__(self) -> str:
        if self.kind == "const":
            return repr(float(self.value))
        if self.kind == "var":
            return f"var:{self.name}"
        return "(" + " ".join([self.op, *[str(a) for a in self.args]]) + ")"


def const(v: float) -> ExpressionTree:
    return ExpressionTree(kind="const", value=float(v))


def var(name: str) -> ExpressionTree:
    return ExpressionTree(kind="var", name=name)


def op(symbol: str, *args: ExpressionTree) -> ExpressionTree:
    arity = 1 if symbol in UNARY_OPS else 2
    if symbol not in BINARY_OPS + UNARY_OPS or len(args) != arity:
        raise InvalidModel(f"bad operator {symbol!r} with {len(args)} arguments")
    return ExpressionTree(kind="op", op=symbol, args=tuple(args))


def parse_expression(text: str) -> ExpressionTree:
    """Inverse of ``str(tree)``: ``(op lhs rhs)``, leaves ``var:<name>`` or floats."""
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()

    def read(pos: int) -> tuple[ExpressionTree, int]:
        tok = tokens[pos]
        if tok == "(":
            symbol = tokens[pos + 1]
            args = []
            pos += 2
            while tokens[pos] != ")":
                node, pos = read(pos)
                args.append(node)
            return op(symbol, *args), pos + 1
        if tok.startswith("var:"):
            return var(tok[4:]), pos + 1
        try:
            return const(float(tok)), pos + 1
        except ValueError:
            raise InvalidModel(f"bad expression token {tok!r}") from None

    tree, end = read(0)
    if end != len(tokens):
        raise InvalidModel(f"trailing tokens in expression {text!r}")
    return tree


def evaluate_expression(tree: ExpressionTree, row: dict[str, float]) -> float:
    """Scalar evaluation on one row; protected division returns a NaN sentinel."""
    if tree.kind == "const":
        return float(tree.value)
    if tree.kind == "var":
        try:
            return float(row[tree.name])
        except KeyError:
            raise UnresolvedReference(tree.name) from None
    vals = [evaluate_expression(a, row) for a in tree.args]
    if tree.op == "neg":
        return -vals[0]
    a, b = vals
    if tree.op == "+":
        return a + b
    if tree.op == "-":
        return a - b
    if tree.op == "*":
        return a * b
    if abs(b) < DIV_EPS:
        return float("nan")
    return a / b


def _evaluate_columns(tree: ExpressionTree, columns: dict[str, np.ndarray],
                      n_rows: int) -> tuple[np.ndarray, bool]:
    if tree.kind == "const":
        return np.full(n_rows, tree.value), True
    if tree.kind == "var":
        try:
            return columns[tree.name], True
        except KeyError:
            raise UnresolvedReference(tree.name) from None
    parts = [_evaluate_columns(a, columns, n_rows) for a in tree.args]
    ok = all(p[1] for p in parts)
    if tree.op == "neg":
        return -parts[0][0], ok
    a, b = parts[0][0], parts[1][0]
    if tree.op == "+":
        return a + b, ok
    if tree.op == "-":
        return a - b, ok
    if tree.op == "*":
        return a * b, ok
    bad = np.abs(b) < DIV_EPS
    if bad.any():
        ok = False
        b = np.where(bad, 1.0, b)
    return a / b, ok


def fold_constants(tree: ExpressionTree) -> ExpressionTree:
    """Collapse operator nodes whose children are all constants."""
    if tree.kind != "op":
        return tree
    args = tuple(fold_constants(a) for a in tree.args)
    if all(a.kind == "const" for a in args):
        val = evaluate_expression(ExpressionTree(kind="op", op=tree.op, args=args), {})
        if np.isfinite(val):
            return const(val)
    return ExpressionTree(kind="op", op=tree.op, args=args)


@dataclass(frozen=True)
class RegressionTable:
    """Inputs (selected states and per-dataset parameters) against correction targets."""

    columns: tuple[str, ...]
    data: np.ndarray                # (n_rows, n_columns)
    targets: np.ndarray             # (n_rows, n_targets)
    target_names: tuple[str, ...]

    def __post_init__(self):
        data = np.atleast_2d(np.asarray(self.data, dtype=float))
        targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "targets", targets)
        if data.shape[1] != len(self.columns):
            raise InvalidModel("table data width != number of columns")
        if targets.shape[0] != data.shape[0]:
            raise InvalidModel("targets rows != data rows")
        if not (np.all(np.isfinite(data)) and np.all(np.isfinite(targets))):
            raise InvalidModel("regression table contains non-finite entries")

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    def column_arrays(self) -> dict[str, np.ndarray]:
        return {name: self.data[:, i] for i, name in enumerate(self.columns)}


def build_regression_table(aug_masked: ude.AugmentedModel, theta: np.ndarray,
                           datasets, selected_inputs: Sequence[str],
                           selected_params: Sequence[str],
                           dt: Optional[float] = None,
                           substeps: int = 1) -> RegressionTable:
    """One row per saved sample: physical input values, the dataset's parameter
    values, and the network's scaled correction outputs at that sample."""
    base = aug_masked.base
    state_pos = {name: i for i, name in enumerate(base.state_names)}
    param_pos = {name: i for i, name in enumerate(base.param_names)}
    for name in selected_inputs:
        if name not in state_pos:
            raise InvalidModel(f"unknown state column {name!r}")
    for name in selected_params:
        if name not in param_pos:
            raise InvalidModel(f"unknown parameter column {name!r}")

    blocks, target_blocks = [], []
    for ds in datasets:
        traj = ude.simulate_augmented(aug_masked, theta, ds.config, ds.times, dt=dt,
                                      substeps=substeps)
        state_cols = traj.states[:, [state_pos[n] for n in selected_inputs]]
        param_cols = np.tile([ds.config[param_pos[n]] for n in selected_params],
                             (len(ds.times), 1))
        blocks.append(np.hstack([state_cols, param_cols]) if selected_params
                      else state_cols)
        corr = reduction.correction_matrix(aug_masked, theta, traj.states)
        target_blocks.append(corr[:, aug_masked.output_indices])
    names = tuple(selected_inputs) + tuple(selected_params)
    target_names = tuple(f"delta_{base.state_names[i]}" for i in aug_masked.output_indices)
    return RegressionTable(columns=names, data=np.vstack(blocks),
                           targets=np.vstack(target_blocks), target_names=target_names)


@dataclass(frozen=True)
class ParetoEntry:
    tree: ExpressionTree
    complexity: int
    mse: float


class ParetoFront:
    """Non-dominated (complexity, mse) set, kept sorted by complexity."""

    def __init__(self):
        self.entries: list[ParetoEntry] = []

    def dominated(self, complexity: int, mse: float) -> bool:
        return any(e.complexity <= complexity and e.mse <= mse
                   and (e.complexity < complexity or e.mse < mse)
                   for e in self.entries)

    def insert(self, tree: ExpressionTree, mse: float) -> bool:
        c = tree.complexity
        if not np.isfinite(mse) or self.dominated(c, mse):
            return False
        if any(e.complexity == c and e.mse == mse for e in self.entries):
            return False
        self.entries = [e for e in self.entries
                        if not (c <= e.complexity and mse <= e.mse)]
        self.entries.append(ParetoEntry(tree=tree, complexity=c, mse=float(mse)))
        self.entries.sort(key=lambda e: e.complexity)
        return True

    def best_mse(self) -> float:
        return min((e.mse for e in self.entries), default=np.inf)

    def to_jsonable(self) -> list[dict]:
        return [{"expression": str(e.tree), "complexity": e.complexity, "mse": e.mse}
                for e in self.entries]

    @staticmethod
    def from_jsonable(items: list[dict]) -> "ParetoFront":
        front = ParetoFront()
        front.entries = [ParetoEntry(tree=parse_expression(d["expression"]),
                                     complexity=int(d["complexity"]), mse=float(d["mse"]))
                         for d in items]
        return front


@dataclass(frozen=True)
class SymRegConfig:
    population: int = 500
    generations: int = 200
    tournament: int = 5
    p_crossover: float = 0.7
    p_mutation: float = 0.25
    max_complexity: int = 25
    parsimony: float = 1e-4
    nm_steps: int = 50
    const_low: float = -2.0
    const_high: float = 2.0
    early_stop_mse: float = 1e-12
    seed: int = 0


class _Search:
    """One GP run against a single target column."""

    def __init__(self, table: RegressionTable, target: np.ndarray, cfg: SymRegConfig,
                 seed: int):
        self.columns = table.column_arrays()
        self.names = list(table.columns)
        self.n_rows = table.n_rows
        self.target = target
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.front = ParetoFront()
        self._refined: dict[str, tuple[ExpressionTree, float]] = {}

    # -- construction ------------------------------------------------------

    def random_leaf(self) -> ExpressionTree:
        if self.rng.random() < 0.75:
            return var(self.names[int(self.rng.integers(len(self.names)))])
        return const(float(self.rng.uniform(self.cfg.const_low, self.cfg.const_high)))

    def random_tree(self, depth: int, method: str) -> ExpressionTree:
        if depth <= 0 or (method == "grow" and self.rng.random() < 0.35):
            return self.random_leaf()
        r = self.rng.random()
        if r < 0.1:
            return op("neg", self.random_tree(depth - 1, method))
        symbol = BINARY_OPS[int(self.rng.integers(4))]
        return op(symbol, self.random_tree(depth - 1, method),
                  self.random_tree(depth - 1, method))

    def initial_population(self) -> list[ExpressionTree]:
        # canonical building blocks first, then ramped random trees
        pop = [const(0.0), const(float(np.mean(self.target)))]
        pop += [var(name) for name in self.names]
        depths = [1, 2, 3, 4]
        for i in range(self.cfg.population - len(pop)):
            method = "grow" if i % 2 == 0 else "full"
            pop.append(self.random_tree(depths[i % len(depths)], method))
        return pop[: self.cfg.population]

    # -- scoring -----------------------------------------------------------

    def predictions(self, tree: ExpressionTree):
        try:
            pred, ok = _evaluate_columns(tree, self.columns, self.n_rows)
        except UnresolvedReference:
            return None
        if not ok or not np.all(np.isfinite(pred)):
            return None
        return pred

    def mse(self, tree: ExpressionTree) -> float:
        pred = self.predictions(tree)
        if pred is None:
            return np.inf
        diff = pred - self.target
        return float(np.mean(diff * diff))

    def affine_rescale(self, tree: ExpressionTree,
                       pred: np.ndarray) -> Optional[ExpressionTree]:
        """Least-squares a*f+b wrapper: lets a shape-correct candidate compete
        on the front even when its constants are off."""
        var_p = float(pred.var())
        if var_p < 1e-30:
            return None
        a = float(np.mean((pred - pred.mean()) * (self.target - self.target.mean()))
                  / var_p)
        b = float(self.target.mean() - a * pred.mean())
        scale = max(float(np.abs(self.target).max()), 1e-30)
        out = tree
        if abs(a - 1.0) > 1e-12:
            out = op("*", const(a), out)
        if abs(b) > 1e-12 * scale:
            out = op("+", out, const(b))
        return None if out is tree else out

    def fitness(self, tree: ExpressionTree, mse: float) -> float:
        if not np.isfinite(mse):
            return np.inf
        return mse + self.cfg.parsimony * tree.complexity

    # -- genetic operators ---------------------------------------------------

    def _positions(self, tree: ExpressionTree) -> int:
        return tree.complexity

    def _get_subtree(self, tree: ExpressionTree, pos: int) -> ExpressionTree:
        found = []

        def walk(node, i):
            if i == pos:
                found.append(node)
            i += 1
            for a in node.args:
                i = walk(a, i)
            return i

        walk(tree, 0)
        return found[0]

    def _replace_subtree(self, tree: ExpressionTree, pos: int,
                         repl: ExpressionTree) -> ExpressionTree:
        counter = [0]

        def walk(node):
            i = counter[0]
            counter[0] += 1
            if i == pos:
                return repl
            if node.kind != "op":
                return node
            return ExpressionTree(kind="op", op=node.op,
                                  args=tuple(walk(a) for a in node.args))

        return walk(tree)

    def crossover(self, a: ExpressionTree, b: ExpressionTree) -> ExpressionTree:
        pa = int(self.rng.integers(self._positions(a)))
        pb = int(self.rng.integers(self._positions(b)))
        child = self._replace_subtree(a, pa, self._get_subtree(b, pb))
        return child if child.complexity <= self.cfg.max_complexity else a

    def mutate(self, tree: ExpressionTree) -> ExpressionTree:
        r = self.rng.random()
        consts = _collect_const_positions(tree)
        if consts and r < 0.2:
            pos = consts[int(self.rng.integers(len(consts)))]
            old = self._get_subtree(tree, pos)
            jitter = float(self.rng.normal(0.0, 0.25))
            return self._replace_subtree(tree, pos, const(old.value + jitter))
        if r < 0.55:  # point mutation: swap one leaf or operator in place
            pos = int(self.rng.integers(self._positions(tree)))
            node = self._get_subtree(tree, pos)
            if node.kind == "var" and len(self.names) > 1:
                others = [n for n in self.names if n != node.name]
                repl = var(others[int(self.rng.integers(len(others)))])
            elif node.kind == "const":
                repl = const(node.value + float(self.rng.normal(0.0, 0.25)))
            elif node.kind == "op" and node.op in BINARY_OPS:
                others = [o for o in BINARY_OPS if o != node.op]
                repl = ExpressionTree(kind="op",
                                      op=others[int(self.rng.integers(len(others)))],
                                      args=node.args)
            else:
                repl = self.random_leaf()
            return self._replace_subtree(tree, pos, repl)
        pos = int(self.rng.integers(self._positions(tree)))
        child = self._replace_subtree(tree, pos, self.random_tree(2, "grow"))
        return child if child.complexity <= self.cfg.max_complexity else tree

    def tournament(self, fitnesses: np.ndarray) -> int:
        contenders = self.rng.integers(0, len(fitnesses), size=self.cfg.tournament)
        return int(contenders[np.argmin(fitnesses[contenders])])

    # -- constant refinement -------------------------------------------------

    def refine(self, tree: ExpressionTree,
               extra_starts: tuple[float, ...] = ()) -> tuple[ExpressionTree, float]:
        """Nelder-Mead polish of the numeric constants of a front candidate."""
        key = str(tree)
        if key in self._refined:
            return self._refined[key]
        positions = _collect_const_positions(tree)
        if not positions:
            result = (tree, self.mse(tree))
        else:
            def with_consts(values):
                t = tree
                for p, v in zip(positions, values):
                    t = self._replace_subtree(t, p, const(float(v)))
                return t

            def objective(values):
                m = self.mse(with_consts(values))
                return m if np.isfinite(m) else 1e18

            x0 = np.array([self._get_subtree(tree, p).value for p in positions])
            starts = [x0] + [np.full(len(positions), s) for s in extra_starts]
            best_x, best_m = x0, objective(x0)
            for start in starts:
                sol = minimize(objective, start, method="Nelder-Mead",
                               options={"maxiter": self.cfg.nm_steps,
                                        "xatol": 1e-12, "fatol": 1e-16})
                if sol.fun < best_m:
                    best_x, best_m = sol.x, float(sol.fun)
            candidate = fold_constants(with_consts(best_x))
            m_new, m_old = self.mse(candidate), self.mse(tree)
            result = (candidate, m_new) if m_new <= m_old else (tree, m_old)
        self._refined[key] = result
        return result

    # -- exhaustive small shapes ----------------------------------------------

    _CONST_GRID = (-5.0, -2.0, -1.0, -0.5, 0.5, 1.0, 2.0, 5.0)

    def _shape_score(self, pred: np.ndarray, mse: float, t_var: float,
                     t_centered: np.ndarray) -> float:
        var_p = float(pred.var())
        if var_p < 1e-30:
            return min(mse, t_var)
        cov = float(np.mean((pred - pred.mean()) * t_centered))
        return max(float(t_var - cov * cov / var_p), 0.0)

    def seed_small_shapes(self) -> None:
        """Enumerate every expression shape up to complexity 5 over the table
        columns plus constant slots, score each shape at its best grid
        constants, then polish the promising ones.  Complete for
        small-by-construction laws; the evolutionary phase only has to
        discover larger structure."""
        leaves = [var(n) for n in self.names] + [const(1.0)]
        shapes: list[ExpressionTree] = list(leaves)
        for o in BINARY_OPS:
            for l1 in leaves:
                for l2 in leaves:
                    shapes.append(op(o, l1, l2))
        for o1 in BINARY_OPS:
            for o2 in BINARY_OPS:
                for l1 in leaves:
                    for l2 in leaves:
                        for l3 in leaves:
                            shapes.append(op(o1, op(o2, l1, l2), l3))
                            shapes.append(op(o1, l1, op(o2, l2, l3)))

        t_var = float(self.target.var())
        t_centered = self.target - self.target.mean()
        scored = []
        for tree in shapes:
            positions = _collect_const_positions(tree)
            if len(positions) == 0:
                grid = [()]
            elif len(positions) == 1:
                grid = [(g,) for g in self._CONST_GRID]
            elif len(positions) == 2:
                grid = [(g1, g2) for g1 in self._CONST_GRID
                        for g2 in self._CONST_GRID]
            else:
                continue  # all-constant shapes fold to a plain constant anyway
            best = None
            for values in grid:
                cand = tree
                for p, v in zip(positions, values):
                    cand = self._replace_subtree(cand, p, const(v))
                pred = self.predictions(cand)
                if pred is None:
                    continue
                m = float(np.mean((pred - self.target) ** 2))
                score = self._shape_score(pred, m, t_var, t_centered)
                if best is None or score < best[0]:
                    best = (score, m, cand, pred)
            if best is not None:
                scored.append(best)
        scored.sort(key=lambda item: (item[0], item[2].complexity, str(item[2])))

        for _score, m, tree, pred in scored[:150]:
            refined, m_ref = self.refine(tree)
            self._insert_capped(refined, m_ref)
            wrapped = self.affine_rescale(tree, pred)
            if wrapped is not None:
                refined, m_ref = self.refine(wrapped)
                self._insert_capped(refined, m_ref)

    # -- main loop -----------------------------------------------------------

    def _insert_capped(self, tree: ExpressionTree, mse: float) -> None:
        if tree.complexity <= self.cfg.max_complexity:
            self.front.insert(tree, mse)

    def run(self) -> ParetoFront:
        self.seed_small_shapes()
        pop = self.initial_population()
        t_var = float(self.target.var())
        t_centered = self.target - self.target.mean()
        if self.front.best_mse() <= self.cfg.early_stop_mse:
            return self.front
        for _ in range(self.cfg.generations):
            preds = [self.predictions(t) for t in pop]
            mses = np.array([np.inf if p is None
                             else float(np.mean((p - self.target) ** 2))
                             for p in preds])
            # selection scores candidates by their best affine recalibration
            # (linear scaling), so a shape-correct expression with off
            # constants survives to be refined instead of dying to raw mse
            scaled = np.full(len(pop), np.inf)
            for i, p in enumerate(preds):
                if p is None:
                    continue
                var_p = float(p.var())
                if var_p < 1e-30:
                    scaled[i] = min(mses[i], t_var)
                    continue
                cov = float(np.mean((p - p.mean()) * t_centered))
                scaled[i] = max(float(t_var - cov * cov / var_p), 0.0)
            fits = np.array([self.fitness(t, m) for t, m in zip(pop, scaled)])
            order = np.argsort(fits, kind="stable")
            candidates = list(order[:10]) + list(np.argsort(mses, kind="stable")[:10])
            seen = set()
            for idx in candidates:
                idx = int(idx)
                if idx in seen or preds[idx] is None:
                    continue
                seen.add(idx)
                for tree, m in ((pop[idx], mses[idx]),):
                    if np.isfinite(m) and not self.front.dominated(tree.complexity, m):
                        refined, m_ref = self.refine(tree)
                        self._insert_capped(refined, m_ref)
                wrapped = self.affine_rescale(pop[idx], preds[idx])
                if wrapped is not None and wrapped.complexity <= self.cfg.max_complexity:
                    m_w = self.mse(wrapped)
                    if np.isfinite(m_w) and not self.front.dominated(
                            wrapped.complexity, m_w):
                        refined, m_ref = self.refine(wrapped)
                        self._insert_capped(refined, m_ref)
            if self.front.best_mse() <= self.cfg.early_stop_mse:
                break
            elite = pop[int(order[0])]
            offspring = [elite]
            while len(offspring) < self.cfg.population:
                r = self.rng.random()
                parent = pop[self.tournament(fits)]
                if r < self.cfg.p_crossover:
                    other = pop[self.tournament(fits)]
                    offspring.append(self.crossover(parent, other))
                elif r < self.cfg.p_crossover + self.cfg.p_mutation:
                    offspring.append(self.mutate(parent))
                else:
                    offspring.append(parent)
            pop = offspring
        if not self.front.entries:
            # guarantee a non-empty front: best constant fit
            mean_tree = const(float(np.mean(self.target)))
            self.front.insert(mean_tree, self.mse(mean_tree))
        return self.front


def _collect_const_positions(tree: ExpressionTree) -> list[int]:
    positions = []

    def walk(node, i):
        if node.kind == "const":
            positions.append(i)
        i += 1
        for a in node.args:
            i = walk(a, i)
        return i

    walk(tree, 0)
    return positions


def evolve(table: RegressionTable, cfg: SymRegConfig) -> list[ParetoFront]:
    """Independent GP search per target column; deterministic for a fixed seed."""
    if table.n_rows == 0:
        raise InvalidModel("regression table is empty")
    fronts = []
    for t_index in range(table.targets.shape[1]):
        search = _Search(table, table.targets[:, t_index], cfg,
                         seed=cfg.seed + 7919 * t_index)
        fronts.append(search.run())
    return fronts


def select_expression(front: ParetoFront, strategy: str = "knee") -> ParetoEntry:
    """Pick one entry: the log-mse-per-complexity knee, or defer to the engineer."""
    if not front.entries:
        raise EmptyFront("cannot select from an empty front")
    if strategy == "engineer":
        raise EngineerDecisionPending("explicit front choice required")
    if strategy != "knee":
        raise InvalidModel(f"unknown selection strategy {strategy!r}")
    entries = front.entries
    if len(entries) == 1:
        return entries[0]
    floor = 1e-300
    best_idx, best_drop = 0, -np.inf
    for i in range(1, len(entries)):
        prev, cur = entries[i - 1], entries[i]
        drop = (np.log(max(prev.mse, floor)) - np.log(max(cur.mse, floor))) \
            / (cur.complexity - prev.complexity)
        if drop > best_drop:
            best_idx, best_drop = i, drop
    return entries[best_idx]
