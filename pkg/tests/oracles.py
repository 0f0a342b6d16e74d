"""Independent reference implementations used as test oracles.

Each one follows the textbook definition with explicit loops and shares no
code with the package beyond plain data types.
"""

import math

import numpy as np


def expm_series(A, terms=30):
    """Matrix exponential by truncated Taylor series with scaling and squaring."""
    n = max(0, int(np.ceil(np.log2(max(np.abs(A).sum(axis=1).max(), 1e-300)))) + 1)
    B = A / 2.0**n
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms):
        term = term @ B / k
        out = out + term
    for _ in range(n):
        out = out @ out
    return out


def twist_matrix(xi):
    v, w = xi[:3], xi[3:]
    M = np.zeros((4, 4))
    M[:3, :3] = [[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]]
    M[:3, 3] = v
    return M


def project_scalar(X, Y, Z):
    return X / Z, Y / Z, 1.0 / Z


def backproject_scalar(x, y, d):
    return x / d, y / d, 1.0 / d


def induce_scalar(G_src, G_dst, depth, fx, fy, cx, cy):
    """Per-pixel loop: lift with depth, move by G_dst G_src^-1, project."""
    H, W = depth.shape
    rel = G_dst @ np.linalg.inv(G_src)
    out = np.zeros((H, W, 3))
    mask = np.zeros((H, W), dtype=bool)
    for v in range(H):
        for u in range(W):
            z = depth[v, u]
            if z <= 1e-6:
                continue
            x, y = (u - cx) / fx, (v - cy) / fy
            P = rel @ np.array([x * z, y * z, z, 1.0])
            if P[2] <= 1e-6:
                continue
            out[v, u] = project_scalar(*P[:3])
            mask[v, u] = True
    return out, mask


def correlation_loops(f1, f2):
    H1, W1, D = f1.shape
    H2, W2, _ = f2.shape
    C = np.zeros((H1, W1, H2, W2))
    for i in range(H1):
        for j in range(W1):
            for k in range(H2):
                for m in range(W2):
                    s = 0.0
                    for d in range(D):
                        s += f1[i, j, d] * f2[k, m, d]
                    C[i, j, k, m] = s
    return C


def avg_pool_loops(C):
    H1, W1, H2, W2 = C.shape
    h, w = H2 // 2, W2 // 2
    out = np.zeros((H1, W1, h, w))
    for i in range(H1):
        for j in range(W1):
            for k in range(h):
                for m in range(w):
                    out[i, j, k, m] = (
                        C[i, j, 2 * k, 2 * m] + C[i, j, 2 * k + 1, 2 * m] + C[i, j, 2 * k, 2 * m + 1] + C[i, j, 2 * k + 1, 2 * m + 1]
                    ) / 4.0
    return out


def bilinear_scalar(img, x, y):
    """Bilinear sample of a 2D array with zero padding outside."""
    H, W = img.shape
    x0, y0 = math.floor(x), math.floor(y)
    total = 0.0
    for yy, wy in ((y0, 1.0 - (y - y0)), (y0 + 1, y - y0)):
        for xx, wx in ((x0, 1.0 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= xx < W and 0 <= yy < H:
                total += wy * wx * img[yy, xx]
    return total


def lookup_scalar(levels, coords, radius):
    """Gather loop: level-major, then dy, then dx."""
    H, W = coords.shape[:2]
    n = 2 * radius + 1
    out = np.zeros((H, W, len(levels) * n * n))
    for i in range(H):
        for j in range(W):
            c = 0
            for lvl, vol in enumerate(levels):
                s = 2.0**-lvl
                for dy in range(-radius, radius + 1):
                    for dx in range(-radius, radius + 1):
                        out[i, j, c] = bilinear_scalar(vol[i, j], coords[i, j, 0] * s + dx, coords[i, j, 1] * s + dy)
                        c += 1
    return out


def apply(G, V):
    return np.array([G[:3, :3] @ v + G[:3, 3] for v in V])


def mssd_loops(P_hat, P_bar, V, syms):
    best = math.inf
    for S in syms:
        Q = P_bar @ S
        worst = 0.0
        for v in V:
            a = P_hat[:3, :3] @ v + P_hat[:3, 3]
            b = Q[:3, :3] @ v + Q[:3, 3]
            worst = max(worst, math.sqrt(sum((a - b) ** 2)))
        best = min(best, worst)
    return best


def mspd_loops(P_hat, P_bar, V, syms, fx, fy, cx, cy):
    def px(G, v):
        p = G[:3, :3] @ v + G[:3, 3]
        return np.array([fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy])

    best = math.inf
    for S in syms:
        Q = P_bar @ S
        worst = 0.0
        for v in V:
            worst = max(worst, float(np.linalg.norm(px(P_hat, v) - px(Q, v))))
        best = min(best, worst)
    return best


def vsd_loops(D_hat, D_bar, D_sensor, tau, delta):
    H, W = D_hat.shape
    union = 0
    good = 0
    for v in range(H):
        for u in range(W):
            s = D_sensor[v, u]
            vis_hat = D_hat[v, u] > 0 and (s <= 0 or D_hat[v, u] <= s + delta)
            vis_bar = D_bar[v, u] > 0 and (s <= 0 or D_bar[v, u] <= s + delta)
            if vis_hat or vis_bar:
                union += 1
                if vis_hat and vis_bar and abs(D_hat[v, u] - D_bar[v, u]) < tau:
                    good += 1
    return 0.0 if union == 0 else 1.0 - good / union


def recall_count(errors, thresholds):
    passed = 0
    total = 0
    for e in errors:
        for t in thresholds:
            total += 1
            if e < t:
                passed += 1
    return passed / total


def ray_triangle(orig, d, a, b, c):
    """Moller-Trumbore: distance along ``d`` or None."""
    e1, e2 = b - a, c - a
    p = np.cross(d, e2)
    det = e1 @ p
    if abs(det) < 1e-14:
        return None
    inv = 1.0 / det
    s = orig - a
    u = (s @ p) * inv
    if u < -1e-12 or u > 1 + 1e-12:
        return None
    q = np.cross(s, e1)
    v = (d @ q) * inv
    if v < -1e-12 or u + v > 1 + 1e-12:
        return None
    t = (e2 @ q) * inv
    return t if t > 0 else None


def raycast_depth(V, F, fx, fy, cx, cy, W, H):
    """Z of the nearest hit along the ray through each pixel centre (0 = miss)."""
    out = np.zeros((H, W))
    for v in range(H):
        for u in range(W):
            d = np.array([(u - cx) / fx, (v - cy) / fy, 1.0])
            best = math.inf
            for f in F:
                t = ray_triangle(np.zeros(3), d, V[f[0]], V[f[1]], V[f[2]])
                if t is not None:
                    best = min(best, t)
            out[v, u] = 0.0 if best == math.inf else best  # d has unit Z, so t is the depth
    return out


def dense_gn_step(residual_fn, xi_dim, weights, lam):
    """Damped GN step from a finite-difference Jacobian, solved by QR on the stacked system."""
    r0 = residual_fn(np.zeros(xi_dim))
    J = np.zeros((len(r0), xi_dim))
    h = 1e-7
    for k in range(xi_dim):
        e = np.zeros(xi_dim)
        e[k] = h
        J[:, k] = (residual_fn(e) - residual_fn(-e)) / (2 * h)
    sw = np.sqrt(weights)
    A = sw[:, None] * J
    b = -sw * r0
    D = np.sqrt(lam * np.sum(A * A, axis=0))
    A_aug = np.vstack([A, np.diag(D)])
    b_aug = np.concatenate([b, np.zeros(xi_dim)])
    Q, R = np.linalg.qr(A_aug)
    return np.linalg.solve(R, Q.T @ b_aug)
