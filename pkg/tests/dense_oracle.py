"""Loop-based dense construction of the four mesh operators.

Written straight from the textbook formulas, sharing no code with the
sparse builders, so it can serve as an independent oracle on small meshes.
"""

import numpy as np


def _frames(p):
    z = np.array([0.0, 0.0, 1.0])
    north = z - p[2] * p
    east = np.cross(z, p)
    if np.linalg.norm(north) < 1e-12 or np.linalg.norm(east) < 1e-12:
        return np.zeros(3), np.zeros(3)
    return north / np.linalg.norm(north), east / np.linalg.norm(east)


def _cot(u, v):
    return float(np.dot(u, v) / np.linalg.norm(np.cross(u, v)))


def dense_operators(mesh):
    x = np.asarray(mesh.vertices)
    n = len(x)
    grad = np.zeros((n, n, 3))
    weight = np.zeros(n)
    stiff = np.zeros((n, n))
    mass = np.zeros(n)
    for tri in np.asarray(mesh.faces):
        i, j, k = (int(t) for t in tri)
        normal = np.cross(x[j] - x[i], x[k] - x[i])
        area = 0.5 * np.linalg.norm(normal)
        nhat = normal / (2.0 * area)
        # hat gradient of a corner: n x (opposite edge, walked CCW) / (2A)
        hats = {
            i: np.cross(nhat, x[k] - x[j]) / (2.0 * area),
            j: np.cross(nhat, x[i] - x[k]) / (2.0 * area),
            k: np.cross(nhat, x[j] - x[i]) / (2.0 * area),
        }
        for v in (i, j, k):
            weight[v] += area
            mass[v] += area / 3.0
            for u, g in hats.items():
                grad[v, u] += area * g
        for a, b, c in ((i, j, k), (j, k, i), (k, i, j)):
            # the angle at c faces edge (a, b)
            w = 0.5 * _cot(x[a] - x[c], x[b] - x[c])
            stiff[a, b] += w
            stiff[b, a] += w
    grad /= weight[:, None, None]
    lat = np.zeros((n, n))
    lng = np.zeros((n, n))
    for v in range(n):
        north, east = _frames(x[v])
        lat[v] = grad[v] @ north
        lng[v] = grad[v] @ east
    lap = stiff - np.diag(stiff.sum(axis=1))
    lap /= mass[:, None]
    return {"identity": np.eye(n), "grad_lat": lat, "grad_lng": lng, "laplacian": lap}
