"""
Максимальный поток / минимальный разрез с переиспользованием деревьев
поиска (Бойков-Колмогоров) для решёточных графов малой степени.
"""

import logging
from collections import deque

import numpy as np

logger = logging.getLogger(__name__)

SOURCE = 0
SINK = 1

_FREE = 0
_S = 1
_T = 2
_TERMINAL = -1
_ORPHAN = -2
_NONE = -3


class GraphCut:
    """
    Ориентированный граф с терминалами s и t.

    Дуги хранятся парами: дуга a и обратная ей a ^ 1.

    Args:
        n_nodes: число нетерминальных вершин
    """

    def __init__(self, n_nodes: int) -> None:
        if n_nodes < 0:
            raise ValueError("node count must be non-negative")
        self.n_nodes = n_nodes
        self._source_cap = np.zeros(n_nodes)
        self._sink_cap = np.zeros(n_nodes)
        self._head: list[int] = []
        self._cap: list[float] = []
        self._tree: list[int] | None = None
        self._flow: float | None = None

    def _check_node(self, i: int) -> None:
        if not 0 <= i < self.n_nodes:
            raise IndexError(f"node {i} out of range")

    def add_tedge(self, i: int, cap_source: float, cap_sink: float) -> None:
        """Добавляет ёмкости s -> i и i -> t."""
        self._check_node(i)
        if cap_source < 0 or cap_sink < 0:
            raise ValueError(f"negative terminal capacity at node {i}")
        self._source_cap[i] += cap_source
        self._sink_cap[i] += cap_sink
        self._flow = None

    def add_tedges(self, nodes, cap_source, cap_sink) -> None:
        nodes = np.asarray(nodes, dtype=np.int64).ravel()
        cs = np.broadcast_to(np.asarray(cap_source, dtype=np.float64),
                             nodes.shape)
        ct = np.broadcast_to(np.asarray(cap_sink, dtype=np.float64),
                             nodes.shape)
        if np.any(cs < 0) or np.any(ct < 0):
            raise ValueError("negative terminal capacity")
        if nodes.size and (nodes.min() < 0 or nodes.max() >= self.n_nodes):
            raise IndexError("node out of range")
        np.add.at(self._source_cap, nodes, cs)
        np.add.at(self._sink_cap, nodes, ct)
        self._flow = None

    def add_edge(self, i: int, j: int, cap: float, rev_cap: float) -> None:
        """Ребро i -> j ёмкости cap и j -> i ёмкости rev_cap."""
        self._check_node(i)
        self._check_node(j)
        if cap < 0 or rev_cap < 0:
            raise ValueError(f"negative capacity on edge ({i}, {j})")
        if i == j:
            return
        self._head += [j, i]
        self._cap += [float(cap), float(rev_cap)]
        self._flow = None

    def add_edges(self, i, j, cap, rev_cap) -> None:
        i = np.asarray(i, dtype=np.int64).ravel()
        j = np.asarray(j, dtype=np.int64).ravel()
        cap = np.broadcast_to(np.asarray(cap, dtype=np.float64), i.shape)
        rev = np.broadcast_to(np.asarray(rev_cap, dtype=np.float64), i.shape)
        if np.any(cap < 0) or np.any(rev < 0):
            raise ValueError("negative edge capacity")
        if i.size and (min(i.min(), j.min()) < 0
                       or max(i.max(), j.max()) >= self.n_nodes):
            raise IndexError("node out of range")
        keep = i != j
        head = np.empty(2 * int(keep.sum()), dtype=np.int64)
        caps = np.empty(len(head))
        head[0::2], head[1::2] = j[keep], i[keep]
        caps[0::2], caps[1::2] = cap[keep], rev[keep]
        self._head += head.tolist()
        self._cap += caps.tolist()
        self._flow = None

    def maxflow(self) -> float:
        """Считает максимальный поток; равен стоимости минимального разреза."""
        if self._flow is None:
            self._flow = self._solve()
        return self._flow

    def segment(self, i: int) -> int:
        """SOURCE, если вершина в s-дереве, иначе SINK."""
        self._check_node(i)
        self.maxflow()
        return SOURCE if self._tree[i] == _S else SINK

    def segments(self) -> np.ndarray:
        """Булев массив: True у вершин на стороне стока."""
        self.maxflow()
        return np.array([t != _S for t in self._tree], dtype=bool)

    # --- алгоритм --------------------------------------------------------

    def _solve(self) -> float:
        n = self.n_nodes
        head = self._head
        cap = list(self._cap)
        adj: list[list[int]] = [[] for _ in range(n)]
        for a in range(len(head)):
            adj[head[a ^ 1]].append(a)

        cs, ct = self._source_cap, self._sink_cap
        flow = float(np.minimum(cs, ct).sum())
        tr = (cs - ct).tolist()

        tree = [_FREE] * n
        parent = [_NONE] * n
        active = deque()
        in_active = [False] * n
        for i in range(n):
            if tr[i] > 0:
                tree[i], parent[i] = _S, _TERMINAL
            elif tr[i] < 0:
                tree[i], parent[i] = _T, _TERMINAL
            else:
                continue
            active.append(i)
            in_active[i] = True

        def activate(i: int) -> None:
            if not in_active[i]:
                active.append(i)
                in_active[i] = True

        def valid_origin(j: int) -> bool:
            while True:
                p = parent[j]
                if p == _TERMINAL:
                    return True
                if p < 0:
                    return False
                j = head[p]

        while active:
            i = active.popleft()
            in_active[i] = False
            if tree[i] == _FREE:
                continue
            bridge = -1
            if tree[i] == _S:
                for a in adj[i]:
                    if cap[a] <= 0:
                        continue
                    j = head[a]
                    if tree[j] == _FREE:
                        tree[j], parent[j] = _S, a ^ 1
                        activate(j)
                    elif tree[j] == _T:
                        bridge = a
                        break
            else:
                for a in adj[i]:
                    if cap[a ^ 1] <= 0:
                        continue
                    j = head[a]
                    if tree[j] == _FREE:
                        tree[j], parent[j] = _T, a ^ 1
                        activate(j)
                    elif tree[j] == _S:
                        bridge = a ^ 1
                        break
            if bridge < 0:
                continue

            active.appendleft(i)
            in_active[i] = True

            # узкое место пути s -> bridge -> t
            bottleneck = cap[bridge]
            x = head[bridge ^ 1]
            while parent[x] != _TERMINAL:
                a = parent[x]
                bottleneck = min(bottleneck, cap[a ^ 1])
                x = head[a]
            bottleneck = min(bottleneck, tr[x])
            x = head[bridge]
            while parent[x] != _TERMINAL:
                a = parent[x]
                bottleneck = min(bottleneck, cap[a])
                x = head[a]
            bottleneck = min(bottleneck, -tr[x])

            orphans = deque()
            cap[bridge] -= bottleneck
            cap[bridge ^ 1] += bottleneck
            x = head[bridge ^ 1]
            while parent[x] != _TERMINAL:
                a = parent[x]
                cap[a] += bottleneck
                cap[a ^ 1] -= bottleneck
                nxt = head[a]
                if cap[a ^ 1] <= 0:
                    parent[x] = _ORPHAN
                    orphans.append(x)
                x = nxt
            tr[x] -= bottleneck
            if tr[x] <= 0:
                parent[x] = _ORPHAN
                orphans.append(x)
            x = head[bridge]
            while parent[x] != _TERMINAL:
                a = parent[x]
                cap[a ^ 1] += bottleneck
                cap[a] -= bottleneck
                nxt = head[a]
                if cap[a] <= 0:
                    parent[x] = _ORPHAN
                    orphans.append(x)
                x = nxt
            tr[x] += bottleneck
            if tr[x] >= 0:
                parent[x] = _ORPHAN
                orphans.append(x)
            flow += bottleneck

            # усыновление сирот
            while orphans:
                x = orphans.popleft()
                if parent[x] != _ORPHAN:
                    continue
                side = tree[x]
                new_parent = _NONE
                for a in adj[x]:
                    j = head[a]
                    if tree[j] != side or parent[j] == _NONE:
                        continue
                    residual = cap[a ^ 1] if side == _S else cap[a]
                    if residual > 0 and valid_origin(j):
                        new_parent = a
                        break
                if new_parent != _NONE:
                    parent[x] = new_parent
                    continue
                for a in adj[x]:
                    j = head[a]
                    if tree[j] != side:
                        continue
                    residual = cap[a ^ 1] if side == _S else cap[a]
                    if residual > 0:
                        activate(j)
                    p = parent[j]
                    if p >= 0 and head[p] == x:
                        parent[j] = _ORPHAN
                        orphans.append(j)
                tree[x], parent[x] = _FREE, _NONE

        self._tree = tree
        logger.debug("maxflow: %d nodes, %d arcs, flow %.6g", n, len(head),
                     flow)
        return flow


def min_cut(graph: GraphCut) -> tuple[float, np.ndarray]:
    """
    Returns:
        стоимость разреза и булева маска вершин на стороне истока
    """
    value = graph.maxflow()
    return value, ~graph.segments()
