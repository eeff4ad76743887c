"""Class raster to stand polygons, with a minimum-mapping-unit merge."""

from __future__ import annotations

import heapq
from collections import defaultdict

import numpy as np
from scipy import ndimage

from .preprocess import StandPolygon
from .raster import GeoTransform, Raster

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
DEFAULT_MIN_AREA_HA = 0.2


def label_components(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """4-connected components of equal class.

    Returns (ids, comp_class): an int (H, W) id map numbered in raster-scan
    order of each component's first pixel, and the class of every id.
    """
    ids = np.zeros(labels.shape, dtype=np.int64)
    offset = 0
    for cls in np.unique(labels):
        lab, n = ndimage.label(labels == cls, structure=FOUR_CONNECTED)
        ids[lab > 0] = lab[lab > 0] + offset
        offset += n
    _, first, inverse = np.unique(ids.ravel(), return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    ids = rank[inverse].reshape(labels.shape)
    comp_class = np.empty(len(first), dtype=labels.dtype)
    comp_class[ids.ravel()] = labels.ravel()
    return ids, comp_class


def _adjacency(ids: np.ndarray) -> dict[int, dict[int, int]]:
    """Shared pixel-edge counts between touching components."""
    pairs = []
    for a, b in ((ids[:, :-1], ids[:, 1:]), (ids[:-1, :], ids[1:, :])):
        diff = a != b
        pairs.append(np.stack([a[diff], b[diff]], axis=1))
    p = np.concatenate(pairs)
    p = np.sort(p, axis=1)
    uniq, counts = np.unique(p, axis=0, return_counts=True)
    adj: dict[int, dict[int, int]] = defaultdict(dict)
    for (a, b), c in zip(uniq.tolist(), counts.tolist()):
        adj[a][b] = c
        adj[b][a] = c
    return adj


def mmu_merge(class_raster: Raster, min_area_ha: float = DEFAULT_MIN_AREA_HA) -> Raster:
    """Absorb components below ``min_area_ha`` into a neighbour.

    Smallest components go first (ties: raster-scan order). Each is merged
    into the neighbour sharing the longest boundary, ties to the lower class
    id. Same-class components that become adjacent are fused.
    """
    labels = class_raster.data[0]
    ids, comp_class = label_components(labels)
    n = len(comp_class)
    cell_area = class_raster.transform.cell_size ** 2
    min_pixels = min_area_ha * 10_000.0 / cell_area
    area = np.bincount(ids.ravel(), minlength=n).astype(np.int64)
    cls = comp_class.astype(np.int64).tolist()
    adj = _adjacency(ids)
    parent = list(range(n))
    alive = [True] * n

    def absorb(src: int, dst: int) -> None:
        alive[src] = False
        parent[src] = dst
        area[dst] += area[src]
        for c, cnt in adj.pop(src, {}).items():
            del adj[c][src]
            if c != dst:
                adj[dst][c] = adj[dst].get(c, 0) + cnt
                adj[c][dst] = adj[c].get(dst, 0) + cnt

    heap = [(int(area[i]), i) for i in range(n) if area[i] < min_pixels]
    heapq.heapify(heap)
    while heap:
        a, i = heapq.heappop(heap)
        if not alive[i] or a != area[i] or area[i] >= min_pixels:
            continue
        nbrs = adj.get(i)
        if not nbrs:
            continue
        target = max(nbrs, key=lambda c: (nbrs[c], -cls[c], -c))
        absorb(i, target)
        for c in [c for c in adj[target] if cls[c] == cls[target]]:
            absorb(c, target)
        if area[target] < min_pixels:
            heapq.heappush(heap, (int(area[target]), target))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    root_class = np.array([cls[find(i)] for i in range(n)], dtype=labels.dtype)
    return Raster(root_class[ids][None], class_raster.transform, class_raster.nodata, class_raster.band_names)


# left-turn preference relative to the incoming heading (dr, dc)
def _turn_order(d: tuple[int, int]) -> list[tuple[int, int]]:
    dr, dc = d
    # in (row, col) grid coordinates with rows pointing down, a left turn in map
    # view maps heading (dr, dc) to (-dc, dr)
    return [(-dc, dr), (dr, dc), (dc, -dr)]


def _boundary_edges(mask: np.ndarray) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Directed pixel-edge boundary of ``mask`` with the interior on the left."""
    h, w = mask.shape
    p = np.pad(mask, 1)
    core = p[1:-1, 1:-1]
    edges = []
    # (neighbour offset, start corner, end corner) in (row, col) vertex coords
    sides = (
        ((0, -1), (0, 0), (1, 0)),  # left side runs down
        ((1, 0), (1, 0), (1, 1)),  # bottom side runs right
        ((0, 1), (1, 1), (0, 1)),  # right side runs up
        ((-1, 0), (0, 1), (0, 0)),  # top side runs left
    )
    for (dr, dc), s, e in sides:
        nb = p[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        rr, cc = np.nonzero(core & ~nb)
        for r, c in zip(rr.tolist(), cc.tolist()):
            edges.append(((r + s[0], c + s[1]), (r + e[0], c + e[1])))
    return edges


def trace_rings(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """Closed vertex rings (row, col) following pixel edges of ``mask``."""
    outgoing: dict[tuple[int, int], list[tuple[int, int]]] = defaultdict(list)
    for s, e in _boundary_edges(mask):
        outgoing[s].append(e)
    rings = []
    while outgoing:
        start = min(outgoing)
        ring = [start]
        cur = start
        heading = None
        while True:
            choices = outgoing[cur]
            if heading is None or len(choices) == 1:
                nxt = choices[0]
            else:
                dirs = {(e[0] - cur[0], e[1] - cur[1]): e for e in choices}
                nxt = next(dirs[d] for d in _turn_order(heading) if d in dirs)
            choices.remove(nxt)
            if not choices:
                del outgoing[cur]
            heading = (nxt[0] - cur[0], nxt[1] - cur[1])
            cur = nxt
            ring.append(cur)
            if cur == start:
                break
        rings.append(_drop_collinear(ring))
    return rings


def _drop_collinear(ring: list[tuple[int, int]]) -> list[tuple[int, int]]:
    pts = ring[:-1]
    n = len(pts)
    keep = []
    for i in range(n):
        a, b, c = pts[i - 1], pts[i], pts[(i + 1) % n]
        if (b[0] - a[0]) * (c[1] - b[1]) != (b[1] - a[1]) * (c[0] - b[0]):
            keep.append(b)
    return keep + keep[:1]


def _to_map(ring: list[tuple[int, int]], t: GeoTransform) -> np.ndarray:
    rc = np.asarray(ring, dtype=np.float64)
    return np.column_stack([t.origin_x + rc[:, 1] * t.cell_size, t.origin_y - rc[:, 0] * t.cell_size])


def _signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def vectorize_classmap(
    class_raster: Raster,
    min_area_ha: float = DEFAULT_MIN_AREA_HA,
) -> list[StandPolygon]:
    """One polygon per 4-connected component after the MMU merge.

    Pass ``min_area_ha=0`` to skip merging. The exterior ring (largest, counter-
    clockwise) comes first; holes are clockwise.
    """
    merged = mmu_merge(class_raster, min_area_ha) if min_area_ha > 0 else class_raster
    ids, comp_class = label_components(merged.data[0])
    objects = ndimage.find_objects(ids + 1)
    polygons = []
    for i, sl in enumerate(objects):
        if sl is None:
            continue
        r0, c0 = sl[0].start, sl[1].start
        sub = ids[sl] == i
        rings = []
        for ring in trace_rings(sub):
            shifted = [(r + r0, c + c0) for r, c in ring]
            rings.append(_to_map(shifted, class_raster.transform))
        rings.sort(key=_signed_area, reverse=True)
        polygons.append(StandPolygon.for_class(tuple(rings), int(comp_class[i])))
    return polygons
