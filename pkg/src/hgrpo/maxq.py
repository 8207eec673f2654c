"""Exact verifier for recursive value decomposition on enumerable MDPs.

Implements hierarchical policy evaluation via discounted exit kernels
(absorbing-chain linear algebra: gamma^N folds into the kernel, with N
counting primitive steps), recursively optimal policies by bottom-up SMDP
value iteration, and the global-optimality check against a flat
value-iteration oracle, including the trajectory-partition condition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from hgrpo.errors import ContractViolation, DivergenceError

PRIMITIVE = "action"
COMPOSITE = "task"


@dataclass
class FlatMdp:
    """Finite MDP with per-transition rewards R(s'|s,a)."""

    transitions: np.ndarray  # (A, S, S) row-stochastic
    rewards: np.ndarray      # (A, S, S)
    gamma: float
    terminal: np.ndarray     # (S,) bool
    start: int = 0

    def __post_init__(self) -> None:
        A, S, S2 = self.transitions.shape
        if S != S2 or self.rewards.shape != (A, S, S):
            raise ContractViolation("transition/reward tensor shapes disagree")
        if not 0.0 < self.gamma <= 1.0:
            raise ContractViolation("gamma must lie in (0, 1]")
        rowsums = self.transitions.sum(axis=2)
        if not np.allclose(rowsums, 1.0, atol=1e-12):
            raise ContractViolation("transition kernel rows must sum to 1")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[0]

    def to_dict(self) -> dict[str, Any]:
        return {"transitions": self.transitions.tolist(),
                "rewards": self.rewards.tolist(), "gamma": self.gamma,
                "terminal": self.terminal.astype(int).tolist(), "start": self.start}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FlatMdp":
        return cls(np.array(d["transitions"], dtype=float),
                   np.array(d["rewards"], dtype=float), float(d["gamma"]),
                   np.array(d["terminal"], dtype=bool), int(d.get("start", 0)))


@dataclass
class Subtask:
    """One node of the task graph: children are primitives or other subtasks."""

    name: str
    children: list[tuple[str, int]]  # ("action", a) or ("task", i)
    terminal: np.ndarray             # termination predicate as a state mask
    applicable: np.ndarray           # states where this subtask may be invoked


@dataclass
class TaskGraph:
    subtasks: list[Subtask]  # index 0 is the root

    def validate(self, mdp: FlatMdp) -> None:
        if not self.subtasks:
            raise ContractViolation("graph needs at least the root subtask")
        seen: set[int] = set()

        def visit(i: int, stack: tuple[int, ...]) -> None:
            if i in stack:
                raise ContractViolation("task graph contains a cycle")
            if i in seen:
                return
            seen.add(i)
            for kind, ref in self.subtasks[i].children:
                if kind == COMPOSITE:
                    visit(ref, stack + (i,))
                elif not 0 <= ref < mdp.n_actions:
                    raise ContractViolation(f"primitive child {ref} out of range")
        visit(0, ())
        for st in self.subtasks:
            # Subtasks always terminate on MDP-terminal states.
            st.terminal = st.terminal | mdp.terminal
        if not np.array_equal(self.subtasks[0].terminal, mdp.terminal):
            raise ContractViolation("root termination must equal task termination")

    def topo_order(self) -> list[int]:
        order: list[int] = []
        seen: set[int] = set()

        def visit(i: int) -> None:
            if i in seen:
                return
            seen.add(i)
            for kind, ref in self.subtasks[i].children:
                if kind == COMPOSITE:
                    visit(ref)
            order.append(i)
        visit(0)
        return order

    def to_dict(self) -> dict[str, Any]:
        return {"subtasks": [
            {"name": st.name, "children": [[k, int(r)] for k, r in st.children],
             "terminal": st.terminal.astype(int).tolist(),
             "applicable": st.applicable.astype(int).tolist()}
            for st in self.subtasks]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TaskGraph":
        return cls([Subtask(s["name"], [(k, int(r)) for k, r in s["children"]],
                            np.array(s["terminal"], dtype=bool),
                            np.array(s["applicable"], dtype=bool))
                    for s in d["subtasks"]])


# A hierarchical policy maps (subtask index, state) to a child slot.
HierPolicy = dict[int, np.ndarray]


@dataclass
class ValueTables:
    V: dict[int, np.ndarray]                 # per composite subtask
    C: dict[int, np.ndarray]                 # (i) -> (n_children, S)
    Q: dict[int, np.ndarray]                 # (i) -> (n_children, S)
    child_V: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)

    def identity_residual(self, graph: TaskGraph) -> float:
        """max |Q_i(s,g) - (V_g(s) + C_i(s,g))| over composites, slots, states."""
        worst = 0.0
        for i, q in self.Q.items():
            for slot, child in enumerate(graph.subtasks[i].children):
                vg = self.child_V[child]
                worst = max(worst, float(np.abs(q[slot] - (vg + self.C[i][slot])).max()))
        return worst


def _primitive_tables(mdp: FlatMdp, a: int) -> tuple[np.ndarray, np.ndarray]:
    """V_a(s) = one-step expected reward; exit kernel gamma * P_a.

    Terminal states exit in place with no step taken (identity rows), so a
    child invoked at a state where it is already terminated is a no-op.
    """
    v = (mdp.transitions[a] * mdp.rewards[a]).sum(axis=1)
    v = np.where(mdp.terminal, 0.0, v)
    exit_kernel = mdp.gamma * mdp.transitions[a]
    exit_kernel[mdp.terminal] = np.eye(mdp.n_states)[mdp.terminal]
    return v, exit_kernel


def _solve_subtask(mdp: FlatMdp, name: str, inside: np.ndarray,
                   child_v: np.ndarray, child_exit: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Value and discounted exit kernel of one subtask under fixed choices.

    inside: states where the subtask keeps executing; child_v / child_exit:
    rows for the child chosen at each inside state. Solves
      V(s) = v_child(s) + sum_x E_child(s,x) V(x) [x inside],  V = 0 outside
      E(s,.) = E_child(s, outside part) + E_child(s, inside) E(inside, .)
    """
    S = mdp.n_states
    V = np.zeros(S)
    E = np.zeros((S, S))
    out = ~inside
    E[out] = np.eye(S)[out]
    idx = inside.nonzero()[0]
    if idx.size == 0:
        return V, E
    M = child_exit[idx][:, idx]
    lhs = np.eye(idx.size) - M
    try:
        V[idx] = np.linalg.solve(lhs, child_v[idx])
        exit_rows = child_exit[idx].copy()
        exit_rows[:, idx] = 0.0
        E[np.ix_(idx, np.arange(S))] = np.linalg.solve(lhs, exit_rows)
    except np.linalg.LinAlgError:
        raise DivergenceError(f"subtask {name!r} does not terminate under this policy")
    if not (np.isfinite(V).all() and np.isfinite(E).all()):
        raise DivergenceError(f"subtask {name!r} produced non-finite values")
    return V, E


def evaluate_hier_policy(mdp: FlatMdp, graph: TaskGraph, policy: HierPolicy,
                         tol: float = 1e-10) -> ValueTables:
    """Exact evaluation of a hierarchical policy (stack execution semantics)."""
    graph.validate(mdp)
    child_v: dict[tuple[str, int], np.ndarray] = {}
    child_e: dict[tuple[str, int], np.ndarray] = {}
    for a in range(mdp.n_actions):
        child_v[(PRIMITIVE, a)], child_e[(PRIMITIVE, a)] = _primitive_tables(mdp, a)

    tables = ValueTables(V={}, C={}, Q={})
    for i in graph.topo_order():
        st = graph.subtasks[i]
        if not st.children:
            raise ContractViolation(f"composite {st.name!r} has no children")
        S = mdp.n_states
        inside = ~st.terminal
        choice = policy[i]
        # States without a valid choice exit in place with value 0; they must
        # be unreachable under any policy that visits them.
        solved = inside & (choice >= 0) & (choice < len(st.children))
        picked_v = np.zeros(S)
        picked_e = np.zeros((S, S))
        for s in solved.nonzero()[0]:
            key = st.children[int(choice[s])]
            if key[0] == COMPOSITE:
                sub = graph.subtasks[key[1]]
                if not sub.applicable[s] or sub.terminal[s]:
                    raise ContractViolation(
                        f"policy invokes {sub.name!r} where it is not applicable")
            picked_v[s] = child_v[key][s]
            picked_e[s] = child_e[key][s]
        V_i, E_i = _solve_subtask(mdp, st.name, solved, picked_v, picked_e)
        child_v[(COMPOSITE, i)] = V_i
        child_e[(COMPOSITE, i)] = E_i
        tables.V[i] = V_i
        n = len(st.children)
        C = np.zeros((n, S))
        Q = np.zeros((n, S))
        for slot, key in enumerate(st.children):
            C[slot] = child_e[key] @ V_i
            Q[slot] = child_v[key] + C[slot]
        tables.C[i] = C
        tables.Q[i] = Q
    tables.child_V = child_v
    return tables


def flat_policy_value(mdp: FlatMdp, policy: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Standard Bellman evaluation of a stationary flat policy (linear solve)."""
    S = mdp.n_states
    P = np.stack([mdp.transitions[policy[s], s] for s in range(S)])
    r = np.array([(mdp.transitions[policy[s], s] * mdp.rewards[policy[s], s]).sum()
                  for s in range(S)])
    V = np.zeros(S)
    idx = (~mdp.terminal).nonzero()[0]
    if idx.size:
        lhs = np.eye(idx.size) - mdp.gamma * P[idx][:, idx]
        try:
            V[idx] = np.linalg.solve(lhs, r[idx])
        except np.linalg.LinAlgError:
            raise DivergenceError("improper flat policy at gamma = 1")
        if not np.isfinite(V).all():
            raise DivergenceError("flat policy evaluation diverged")
    return V


def flat_value_iteration(mdp: FlatMdp, tol: float = 1e-12, max_iters: int = 100000
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Optimal value and greedy policy (lowest action index breaks ties)."""
    S, A = mdp.n_states, mdp.n_actions
    V = np.zeros(S)
    q = np.zeros((A, S))
    for _ in range(max_iters):
        for a in range(A):
            q[a] = (mdp.transitions[a] * (mdp.rewards[a] + mdp.gamma * V)).sum(axis=1)
        newV = np.where(mdp.terminal, 0.0, q.max(axis=0))
        delta = float(np.abs(newV - V).max())
        V = newV
        if delta <= tol:
            policy = q.argmax(axis=0)
            return V, policy
    raise DivergenceError("value iteration did not converge")


def recursively_optimal_policy(mdp: FlatMdp, graph: TaskGraph, tol: float = 1e-12,
                               max_iters: int = 100000) -> HierPolicy:
    """Bottom-up recursive optimality: each subtask optimizes its own value
    given its (already optimized) children, choosing argmax of V_g + C via
    SMDP value iteration over the children's discounted exit kernels."""
    graph.validate(mdp)
    child_v: dict[tuple[str, int], np.ndarray] = {}
    child_e: dict[tuple[str, int], np.ndarray] = {}
    for a in range(mdp.n_actions):
        child_v[(PRIMITIVE, a)], child_e[(PRIMITIVE, a)] = _primitive_tables(mdp, a)

    policy: HierPolicy = {}
    for i in graph.topo_order():
        st = graph.subtasks[i]
        S = mdp.n_states
        inside = ~st.terminal
        slot_ok = np.zeros((len(st.children), S), dtype=bool)
        for slot, key in enumerate(st.children):
            if key[0] == PRIMITIVE:
                slot_ok[slot] = True
            else:
                sub = graph.subtasks[key[1]]
                slot_ok[slot] = sub.applicable & ~sub.terminal
        V = np.zeros(S)
        for _ in range(max_iters):
            best = np.full(S, -np.inf)
            for slot, key in enumerate(st.children):
                qs = child_v[key] + child_e[key] @ V
                qs = np.where(slot_ok[slot], qs, -np.inf)
                best = np.maximum(best, qs)
            newV = np.where(inside & np.isfinite(best), best, 0.0)
            delta = float(np.abs(newV - V).max())
            V = newV
            if delta <= tol:
                break
        else:
            raise DivergenceError(f"subtask {st.name!r} SMDP iteration diverged")
        choice = np.full(S, -1, dtype=np.int64)
        best = np.full(S, -np.inf)
        for slot, key in enumerate(st.children):
            qs = child_v[key] + child_e[key] @ V
            qs = np.where(slot_ok[slot], qs, -np.inf)
            improves = inside & (qs > best + 1e-13)
            choice[improves] = slot
            best = np.maximum(best, qs)
        policy[i] = choice
        solved = inside & (choice >= 0)
        picked_v = np.zeros(S)
        picked_e = np.zeros((S, S))
        for s in solved.nonzero()[0]:
            key = st.children[choice[s]]
            picked_v[s] = child_v[key][s]
            picked_e[s] = child_e[key][s]
        child_v[(COMPOSITE, i)], child_e[(COMPOSITE, i)] = _solve_subtask(
            mdp, st.name, solved, picked_v, picked_e)
    return policy


# -- proposition check -----------------------------------------------------------

def _greedy_trajectory(mdp: FlatMdp, policy: np.ndarray, cap: int | None = None
                       ) -> tuple[list[int], list[int]] | None:
    """Most-likely trajectory from the start state, or None if it never ends."""
    cap = cap or 4 * mdp.n_states
    s = mdp.start
    states, actions = [s], []
    for _ in range(cap):
        if mdp.terminal[s]:
            return states, actions
        a = int(policy[s])
        s = int(mdp.transitions[a, s].argmax())
        actions.append(a)
        states.append(s)
    return None


def _primitive_descendants(graph: TaskGraph, i: int) -> set[int]:
    out: set[int] = set()
    for kind, ref in graph.subtasks[i].children:
        if kind == PRIMITIVE:
            out.add(ref)
        else:
            out |= _primitive_descendants(graph, ref)
    return out


def partition_condition(mdp: FlatMdp, graph: TaskGraph,
                        flat_policy: np.ndarray) -> bool:
    """Can the flat-optimal trajectory be cut into valid child executions?

    A segment [i..j] is a valid execution of child g iff g is applicable and
    unterminated at s_i, terminates exactly at s_j, is not cut by its own
    termination predicate mid-segment, and uses only g's primitive actions.
    """
    traj = _greedy_trajectory(mdp, flat_policy)
    if traj is None:
        return False
    states, actions = traj
    root = graph.subtasks[0]
    n = len(states)
    reachable = [False] * n
    reachable[0] = True
    for j in range(1, n):
        for i in range(j):
            if not reachable[i]:
                continue
            for kind, ref in root.children:
                if kind == PRIMITIVE:
                    if j == i + 1 and ref == actions[i]:
                        reachable[j] = True
                    continue
                sub = graph.subtasks[ref]
                if not sub.applicable[states[i]] or sub.terminal[states[i]]:
                    continue
                if not sub.terminal[states[j]]:
                    continue
                if any(sub.terminal[states[m]] for m in range(i + 1, j)):
                    continue
                prims = _primitive_descendants(graph, ref)
                if any(a not in prims for a in actions[i:j]):
                    continue
                reachable[j] = True
            if reachable[j]:
                break
    return reachable[n - 1]


def check_proposition1(mdp: FlatMdp, graph: TaskGraph, tol: float = 1e-8
                       ) -> dict[str, Any]:
    """Compare recursively optimal hierarchical value against the flat optimum."""
    flat_v, flat_pi = flat_value_iteration(mdp, tol=min(tol * 1e-4, 1e-12))
    hier_policy = recursively_optimal_policy(mdp, graph, tol=min(tol * 1e-4, 1e-12))
    tables = evaluate_hier_policy(mdp, graph, hier_policy)
    gap = float(flat_v[mdp.start] - tables.V[0][mdp.start])
    return {
        "hier_value": float(tables.V[0][mdp.start]),
        "flat_value": float(flat_v[mdp.start]),
        "gap": gap,
        "partition_condition_holds": partition_condition(mdp, graph, flat_pi),
        "identity_residual": tables.identity_residual(graph),
    }


def save_report(report: dict[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True))


# -- instance generators -----------------------------------------------------------

def random_region_instance(rng: np.random.Generator, max_states: int = 20,
                           max_actions: int = 4
                           ) -> tuple[FlatMdp, TaskGraph, HierPolicy, np.ndarray]:
    """Random MDP with a region-structured two-level graph and a valid policy.

    Children partition the state space by region and terminate on leaving it,
    so stack execution coincides with the pointwise-flattened policy; the
    returned flat policy is that flattening.
    """
    S = int(rng.integers(5, max_states + 1))
    A = int(rng.integers(2, max_actions + 1))
    gamma = float(rng.uniform(0.8, 0.95))
    terminal = np.zeros(S, dtype=bool)
    terminal[rng.choice(S, size=max(1, S // 8), replace=False)] = True
    P = rng.dirichlet(np.ones(S), size=(A, S))
    R = rng.normal(0.0, 1.0, size=(A, S, S))
    for a in range(A):
        P[a, terminal] = np.eye(S)[terminal]
        R[a, terminal] = 0.0
    mdp = FlatMdp(P, R, gamma, terminal)

    k = int(rng.integers(2, 5))
    region = rng.integers(0, k, size=S)
    region[terminal] = -1
    subtasks = [Subtask("root", [(COMPOSITE, j + 1) for j in range(k)],
                        terminal.copy(), np.ones(S, dtype=bool))]
    child_pols = []
    for j in range(k):
        inside = (region == j) & ~terminal
        subtasks.append(Subtask(
            f"region-{j}", [(PRIMITIVE, a) for a in range(A)],
            ~inside, inside.copy()))
        child_pols.append(rng.integers(0, A, size=S))
    graph = TaskGraph(subtasks)

    policy: HierPolicy = {0: np.where(region >= 0, region, 0).astype(np.int64)}
    flat = np.zeros(S, dtype=np.int64)
    for j in range(k):
        policy[j + 1] = child_pols[j].astype(np.int64)
        flat[(region == j)] = child_pols[j][(region == j)]
    return mdp, graph, policy, flat


def random_decomposable_instance(rng: np.random.Generator
                                 ) -> tuple[FlatMdp, TaskGraph]:
    """Layered funnel MDP at gamma = 1 where recursive optimality is global.

    Every trajectory passes each block's single funnel state, so the flat
    optimum decomposes block-wise and the optimal trajectory partitions into
    the block subtasks by construction.
    """
    n_blocks = int(rng.integers(2, 5))
    A = int(rng.integers(2, 4))
    layers: list[list[int]] = []
    funnels: list[int] = []
    next_id = 0

    def new_layer(width: int) -> list[int]:
        nonlocal next_id
        layer = list(range(next_id, next_id + width))
        next_id += width
        layers.append(layer)
        return layer

    block_layers: list[list[list[int]]] = []
    new_layer(1)  # start
    for _ in range(n_blocks):
        widths = [int(rng.integers(1, 4)) for _ in range(int(rng.integers(1, 4)))]
        middles = [new_layer(w) for w in widths]
        funnel_layer = new_layer(1)
        funnels.append(funnel_layer[0])
        block_layers.append(middles + [funnel_layer])

    S = next_id
    P = np.zeros((A, S, S))
    R = np.zeros((A, S, S))
    for li in range(len(layers) - 1):
        for s in layers[li]:
            for a in range(A):
                t = int(rng.choice(layers[li + 1]))
                P[a, s, t] = 1.0
                R[a, s, t] = float(rng.uniform(0.0, 1.0))
    terminal = np.zeros(S, dtype=bool)
    terminal[funnels[-1]] = True
    for a in range(A):
        P[a, terminal] = np.eye(S)[terminal]
    mdp = FlatMdp(P, R, 1.0, terminal)

    subtasks = [Subtask("root", [(COMPOSITE, b + 1) for b in range(n_blocks)],
                        terminal.copy(), np.ones(S, dtype=bool))]
    entry = layers[0][0]
    for b in range(n_blocks):
        member = np.zeros(S, dtype=bool)
        member[entry] = True
        for layer in block_layers[b][:-1]:
            member[layer] = True
        term = np.ones(S, dtype=bool)
        term[member] = False
        subtasks.append(Subtask(f"block-{b}", [(PRIMITIVE, a) for a in range(A)],
                                term, member.copy()))
        entry = funnels[b]
    graph = TaskGraph(subtasks)
    return mdp, graph


def adversarial_fixture() -> tuple[FlatMdp, TaskGraph]:
    """Optimal path is cut mid-subtask by a termination predicate.

    States s0 -> x -> y -> goal, with a shortcut x -> goal of reward 1 and
    the long route worth 100. The first subtask must exit at x; the second
    terminates at {y, goal}, so the y -> goal leg has no covering subtask:
    the partition condition fails, and the recursively optimal policy takes
    the shortcut (gap 99).
    """
    s0, x, y, goal = 0, 1, 2, 3
    S, A = 4, 2
    P = np.zeros((A, S, S))
    R = np.zeros((A, S, S))
    # action 0: forward;  action 1: shortcut at x
    P[0, s0, x] = 1.0
    P[1, s0, x] = 1.0
    P[0, x, y] = 1.0
    P[1, x, goal] = 1.0
    R[1, x, goal] = 1.0
    P[0, y, goal] = 1.0
    P[1, y, goal] = 1.0
    R[0, y, goal] = 100.0
    R[1, y, goal] = 100.0
    terminal = np.zeros(S, dtype=bool)
    terminal[goal] = True
    for a in range(A):
        P[a, terminal] = np.eye(S)[terminal]
    mdp = FlatMdp(P, R, 1.0, terminal, start=s0)

    t1 = np.array([False, True, True, True])   # g1 exits at x (and beyond)
    a1 = np.array([True, False, False, False])
    t2 = np.array([True, False, True, True])   # g2 exits at y or goal
    a2 = np.array([False, True, False, False])
    graph = TaskGraph([
        Subtask("root", [(COMPOSITE, 1), (COMPOSITE, 2)], terminal.copy(),
                np.ones(S, dtype=bool)),
        Subtask("to-x", [(PRIMITIVE, 0), (PRIMITIVE, 1)], t1, a1),
        Subtask("from-x", [(PRIMITIVE, 0), (PRIMITIVE, 1)], t2, a2),
    ])
    return mdp, graph
