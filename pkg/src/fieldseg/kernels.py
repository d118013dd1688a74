"""Hot raster kernels with a numba path and a numpy / pure-Python fallback.

Each public function dispatches on :data:`fieldseg._accel.HAVE_NUMBA`. Both
paths compute identical results (checked in ``tests/test_kernels.py``); the
numba path is only faster. ``benchmarks/bench_kernels.py`` times the pair.
"""
from __future__ import annotations

import heapq

import numpy as np

from ._accel import HAVE_NUMBA, njit

# hierarchy criteria for flood merging
NO_MERGE = 0
DYNAMICS = 1
AREA = 2


# --------------------------------------------------------------------------
# point in polygon (even-odd over every ring of one polygon)

@njit
def _pip_nb(px, py, offsets, r0, r1, c0, c1):
    out = np.zeros((r1 - r0, c1 - c0), dtype=np.bool_)
    nrings = offsets.shape[0] - 1
    for r in range(r0, r1):
        yc = r + 0.5
        for c in range(c0, c1):
            xc = c + 0.5
            inside = False
            for k in range(nrings):
                s = offsets[k]
                e = offsets[k + 1]
                j = e - 1
                for i in range(s, e):
                    yi = py[i]
                    yj = py[j]
                    if (yi > yc) != (yj > yc):
                        xint = px[i] + (yc - yi) * (px[j] - px[i]) / (yj - yi)
                        if xc < xint:
                            inside = not inside
                    j = i
            out[r - r0, c - c0] = inside
    return out


def _pip_np(px, py, offsets, r0, r1, c0, c1):
    yc = (np.arange(r0, r1) + 0.5)[:, None]
    xc = (np.arange(c0, c1) + 0.5)[None, :]
    inside = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    for k in range(offsets.shape[0] - 1):
        s, e = int(offsets[k]), int(offsets[k + 1])
        for i in range(s, e):
            j = e - 1 if i == s else i - 1
            yi, yj = py[i], py[j]
            if yi == yj:
                continue
            crosses = (yi > yc) != (yj > yc)
            xint = px[i] + (yc - yi) * (px[j] - px[i]) / (yj - yi)
            inside ^= crosses & (xc < xint)
    return inside


def polygon_cover(px, py, offsets, r0, r1, c0, c1) -> np.ndarray:
    """Boolean window ``[r0:r1, c0:c1]`` of pixels whose centres fall inside.

    ``px``/``py`` hold the vertices of all rings in pixel units (column, row),
    ``offsets`` the start index of each ring plus a final end index.
    """
    px = np.ascontiguousarray(px, dtype=np.float64)
    py = np.ascontiguousarray(py, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if r1 <= r0 or c1 <= c0:
        return np.zeros((max(r1 - r0, 0), max(c1 - c0, 0)), dtype=bool)
    if HAVE_NUMBA:
        return _pip_nb(px, py, offsets, r0, r1, c0, c1)
    return _pip_np(px, py, offsets, r0, r1, c0, c1)


# --------------------------------------------------------------------------
# interior boundary ring: a labelled pixel is on the ring when some pixel with
# a different id (or the outside of the grid) lies within Chebyshev radius t

@njit
def _ring_nb(ids, t):
    h, w = ids.shape
    out = np.zeros((h, w), dtype=np.bool_)
    for r in range(h):
        for c in range(w):
            f = ids[r, c]
            if f == 0:
                continue
            hit = False
            for rr in range(r - t, r + t + 1):
                if rr < 0 or rr >= h:
                    hit = True
                    break
                for cc in range(c - t, c + t + 1):
                    if cc < 0 or cc >= w or ids[rr, cc] != f:
                        hit = True
                        break
                if hit:
                    break
            out[r, c] = hit
    return out


def _ring_np(ids, t):
    h, w = ids.shape
    padded = np.pad(ids, t, mode="constant", constant_values=0)
    out = np.zeros((h, w), dtype=bool)
    for dr in range(-t, t + 1):
        for dc in range(-t, t + 1):
            out |= padded[t + dr:t + dr + h, t + dc:t + dc + w] != ids
    return out & (ids != 0)


def interior_ring(ids: np.ndarray, thickness: int) -> np.ndarray:
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    if HAVE_NUMBA:
        return _ring_nb(ids, int(thickness))
    return _ring_np(ids, int(thickness))


# --------------------------------------------------------------------------
# marker-driven priority flood with union-find merging of basins
#
# Pixels are pushed with their own altitude and an insertion counter, so ties
# resolve first-in first-out. A pixel is labelled when first discovered. When
# a popped pixel touches a pixel of another basin, the two basins merge if the
# weaker of them (by dynamics or by area) is below ``threshold``.

@njit
def _find(parent, a):
    root = a
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


@njit
def _flood_nb(surface, markers, domain, criterion, threshold):
    h, w = surface.shape
    labels = markers.copy()
    nlab = 0
    for r in range(h):
        for c in range(w):
            if labels[r, c] > nlab:
                nlab = labels[r, c]
    parent = np.arange(nlab + 1)
    minv = np.full(nlab + 1, np.inf)
    area = np.zeros(nlab + 1, dtype=np.int64)
    heap = [(0.0, 0, 0, 0)]
    heap.pop()
    counter = 0
    for r in range(h):
        for c in range(w):
            k = labels[r, c]
            if k > 0:
                area[k] += 1
                if surface[r, c] < minv[k]:
                    minv[k] = surface[r, c]
                heapq.heappush(heap, (surface[r, c], counter, r, c))
                counter += 1
    dr = (-1, 0, 0, 1)
    dc = (0, -1, 1, 0)
    while len(heap) > 0:
        item = heapq.heappop(heap)
        r = item[2]
        c = item[3]
        a = _find(parent, labels[r, c])
        for n in range(4):
            rr = r + dr[n]
            cc = c + dc[n]
            if rr < 0 or rr >= h or cc < 0 or cc >= w or not domain[rr, cc]:
                continue
            q = labels[rr, cc]
            if q == 0:
                labels[rr, cc] = a
                area[a] += 1
                heapq.heappush(heap, (surface[rr, cc], counter, rr, cc))
                counter += 1
            elif criterion != 0:
                b = _find(parent, q)
                if b != a:
                    level = max(surface[r, c], surface[rr, cc])
                    if criterion == 1:
                        weak = min(level - minv[a], level - minv[b])
                    else:
                        weak = float(min(area[a], area[b]))
                    if weak < threshold:
                        lo = min(a, b)
                        hi = max(a, b)
                        parent[hi] = lo
                        minv[lo] = min(minv[lo], minv[hi])
                        area[lo] += area[hi]
                        a = lo
    for r in range(h):
        for c in range(w):
            if labels[r, c] > 0:
                labels[r, c] = _find(parent, labels[r, c])
    return labels


def _find_py(parent, a):
    root = a
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        parent[a], a = root, parent[a]
    return root


def _flood_py(surface, markers, domain, criterion, threshold):
    h, w = surface.shape
    labels = markers.copy()
    nlab = int(labels.max(initial=0))
    parent = list(range(nlab + 1))
    minv = [np.inf] * (nlab + 1)
    area = [0] * (nlab + 1)
    heap = []
    counter = 0
    surf = surface.tolist()
    lab = labels.tolist()
    dom = domain.tolist()
    for r in range(h):
        for c in range(w):
            k = lab[r][c]
            if k > 0:
                area[k] += 1
                minv[k] = min(minv[k], surf[r][c])
                heap.append((surf[r][c], counter, r, c))
                counter += 1
    heapq.heapify(heap)
    while heap:
        _, _, r, c = heapq.heappop(heap)
        a = _find_py(parent, lab[r][c])
        for rr, cc in ((r - 1, c), (r, c - 1), (r, c + 1), (r + 1, c)):
            if rr < 0 or rr >= h or cc < 0 or cc >= w or not dom[rr][cc]:
                continue
            q = lab[rr][cc]
            if q == 0:
                lab[rr][cc] = a
                area[a] += 1
                heapq.heappush(heap, (surf[rr][cc], counter, rr, cc))
                counter += 1
            elif criterion != NO_MERGE:
                b = _find_py(parent, q)
                if b != a:
                    level = max(surf[r][c], surf[rr][cc])
                    if criterion == DYNAMICS:
                        weak = min(level - minv[a], level - minv[b])
                    else:
                        weak = float(min(area[a], area[b]))
                    if weak < threshold:
                        lo, hi = min(a, b), max(a, b)
                        parent[hi] = lo
                        minv[lo] = min(minv[lo], minv[hi])
                        area[lo] += area[hi]
                        a = lo
    out = np.asarray(lab, dtype=np.int64)
    roots = np.array([_find_py(parent, k) for k in range(nlab + 1)], dtype=np.int64)
    return roots[out]


def priority_flood(surface, markers, domain=None, criterion=NO_MERGE, threshold=0.0):
    """Flood ``markers`` (int ids, 0 = unlabelled) over ``surface`` within ``domain``.

    Returns the label raster; pixels unreachable from any marker stay 0.
    """
    surface = np.ascontiguousarray(surface, dtype=np.float64)
    markers = np.ascontiguousarray(markers, dtype=np.int64)
    if domain is None:
        domain = np.ones(surface.shape, dtype=np.bool_)
    domain = np.ascontiguousarray(domain, dtype=np.bool_)
    if surface.shape != markers.shape or surface.shape != domain.shape:
        raise ValueError("surface, markers and domain must share one shape")
    if HAVE_NUMBA:
        return _flood_nb(surface, markers, domain, int(criterion), float(threshold))
    return _flood_py(surface, markers, domain, int(criterion), float(threshold))


# --------------------------------------------------------------------------
# variable-radius dart throwing over pre-drawn candidates, so both backends
# consume the same random stream

@njit
def _darts_nb(cands, radii, spacing):
    n = radii.shape[0]
    pts = np.empty((n, 2))
    rs = np.empty(n)
    keep = np.zeros(n, dtype=np.bool_)
    m = 0
    for i in range(n):
        for a in range(cands.shape[1]):
            x = cands[i, a, 0]
            y = cands[i, a, 1]
            ok = True
            for j in range(m):
                dx = pts[j, 0] - x
                dy = pts[j, 1] - y
                lim = spacing * (rs[j] + radii[i])
                if dx * dx + dy * dy < lim * lim:
                    ok = False
                    break
            if ok:
                pts[m, 0] = x
                pts[m, 1] = y
                rs[m] = radii[i]
                keep[i] = True
                m += 1
                break
    return pts[:m].copy(), keep


def _darts_np(cands, radii, spacing):
    n = radii.shape[0]
    pts = np.empty((n, 2))
    rs = np.empty(n)
    keep = np.zeros(n, dtype=bool)
    m = 0
    for i in range(n):
        for a in range(cands.shape[1]):
            p = cands[i, a]
            lim = spacing * (rs[:m] + radii[i])
            d2 = ((pts[:m] - p) ** 2).sum(axis=1)
            if m == 0 or not np.any(d2 < lim * lim):
                pts[m] = p
                rs[m] = radii[i]
                keep[i] = True
                m += 1
                break
    return pts[:m].copy(), keep


def dart_throw(cands: np.ndarray, radii: np.ndarray, spacing: float):
    """Accept, per seed, the first candidate at least ``spacing * (r_i + r_j)`` from earlier seeds.

    ``cands`` is (n_seeds, attempts, 2). Returns accepted points and a mask of
    which seeds were placed.
    """
    cands = np.ascontiguousarray(cands, dtype=np.float64)
    radii = np.ascontiguousarray(radii, dtype=np.float64)
    if HAVE_NUMBA:
        return _darts_nb(cands, radii, float(spacing))
    return _darts_np(cands, radii, float(spacing))


# --------------------------------------------------------------------------
# power-diagram cell by successive half-plane clipping of a convex polygon

@njit
def _power_cell_nb(i, points, weights, nbrs, width, height):
    cap = 4 + nbrs.shape[0] * 2
    poly = np.empty((cap, 2))
    tmp = np.empty((cap, 2))
    poly[0, 0] = 0.0
    poly[0, 1] = 0.0
    poly[1, 0] = width
    poly[1, 1] = 0.0
    poly[2, 0] = width
    poly[2, 1] = height
    poly[3, 0] = 0.0
    poly[3, 1] = height
    n = 4
    d = np.empty(cap)
    pi0 = points[i, 0]
    pi1 = points[i, 1]
    sqi = pi0 * pi0 + pi1 * pi1
    for jj in range(nbrs.shape[0]):
        j = nbrs[jj]
        if j == i:
            continue
        nx = 2.0 * (points[j, 0] - pi0)
        ny = 2.0 * (points[j, 1] - pi1)
        off = points[j, 0] ** 2 + points[j, 1] ** 2 - sqi - weights[j] + weights[i]
        allin = True
        anyin = False
        for k in range(n):
            d[k] = poly[k, 0] * nx + poly[k, 1] * ny - off
            if d[k] <= 0:
                anyin = True
            else:
                allin = False
        if allin:
            continue
        if not anyin:
            return poly[:0].copy()
        m = 0
        for k in range(n):
            k2 = (k + 1) % n
            ink = d[k] <= 0
            if ink:
                tmp[m, 0] = poly[k, 0]
                tmp[m, 1] = poly[k, 1]
                m += 1
            if ink != (d[k2] <= 0):
                t = d[k] / (d[k] - d[k2])
                tmp[m, 0] = poly[k, 0] + t * (poly[k2, 0] - poly[k, 0])
                tmp[m, 1] = poly[k, 1] + t * (poly[k2, 1] - poly[k, 1])
                m += 1
        for k in range(m):
            poly[k, 0] = tmp[k, 0]
            poly[k, 1] = tmp[k, 1]
        n = m
    return poly[:n].copy()


def _power_cell_np(i, points, weights, nbrs, width, height):
    poly = np.array([[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]])
    sqi = points[i, 0] ** 2 + points[i, 1] ** 2
    for j in nbrs:
        if j == i:
            continue
        normal = np.array([2.0 * (points[j, 0] - points[i, 0]), 2.0 * (points[j, 1] - points[i, 1])])
        off = points[j, 0] ** 2 + points[j, 1] ** 2 - sqi - weights[j] + weights[i]
        d = poly[:, 0] * normal[0] + poly[:, 1] * normal[1] - off
        inside = d <= 0
        if inside.all():
            continue
        if not inside.any():
            return poly[:0]
        nxt_d = np.roll(d, -1)
        nxt = np.roll(poly, -1, axis=0)
        out = []
        for k in range(len(poly)):
            if inside[k]:
                out.append(poly[k])
            if inside[k] != (nxt_d[k] <= 0):
                t = d[k] / (d[k] - nxt_d[k])
                out.append(poly[k] + t * (nxt[k] - poly[k]))
        poly = np.asarray(out)
    return poly


def power_cell(i: int, points, weights, nbrs, width: float, height: float) -> np.ndarray:
    """Cell of seed ``i`` in the power diagram restricted to neighbours ``nbrs``."""
    if HAVE_NUMBA:
        return _power_cell_nb(int(i), points, weights, np.ascontiguousarray(nbrs, dtype=np.int64),
                              float(width), float(height))
    return _power_cell_np(int(i), points, weights, nbrs, float(width), float(height))
