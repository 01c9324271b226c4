"""Independent reference computations used by the tests.

Nothing here imports the package's kinematics, loss or kernel code; the
oracles only read plain model parameters.
"""
import numpy as np
from scipy.spatial.transform import Rotation


def _twist_transform(axis, origin, angle):
    T = np.eye(4)
    R = Rotation.from_rotvec(np.asarray(axis, float) * angle).as_matrix()
    T[:3, :3] = R
    T[:3, 3] = np.asarray(origin, float) - R @ np.asarray(origin, float)
    return T


def chain_transforms(joints, q):
    """Product-of-exponentials transforms after each joint (gripper joints are fixed)."""
    T = np.eye(4)
    out = []
    for j, qj in zip(joints, q):
        if j.kind == "revolute":
            T = T @ _twist_transform(j.axis, j.origin, qj)
        out.append(T.copy())
    return out


def tcp_position(model, q):
    Ts = chain_transforms(model.joints, q)
    p0 = np.asarray(model.joints[-1].origin) + np.asarray(model.tcp_offset)
    return (Ts[-1] @ np.append(p0, 1.0))[:3]


def potential(model, q):
    Ts = chain_transforms(model.joints, q)
    g = np.asarray(model.gravity)
    U = 0.0
    for j, T in zip(model.joints, Ts):
        com = (T @ np.append(j.link_com, 1.0))[:3]
        U -= j.link_mass * float(g @ com)
    return U


def central_diff(f, q, h=1e-6):
    q = np.asarray(q, float)
    cols = []
    for i in range(q.shape[0]):
        e = np.zeros_like(q)
        e[i] = h
        cols.append((np.asarray(f(q + e)) - np.asarray(f(q - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def fd_jacobian(model, q, h=1e-6):
    return central_diff(lambda x: tcp_position(model, x), q, h)


def fd_gravity(model, q, h=1e-6):
    return central_diff(lambda x: np.array([potential(model, x)]), q, h)[0]


def virtual_work_torque(model, q, w, h=1e-6):
    """tau_j = f . dp/dq_j + m . domega/dq_j from perturbed kinematics."""
    force, moment = np.asarray(w[:3]), np.asarray(w[3:])
    tau = np.zeros(len(q))
    for j in range(len(q)):
        e = np.zeros(len(q))
        e[j] = h
        dp = (tcp_position(model, q + e) - tcp_position(model, q - e)) / (2 * h)
        Rp = chain_transforms(model.joints, q + e)[-1][:3, :3]
        Rm = chain_transforms(model.joints, q - e)[-1][:3, :3]
        dtheta = Rotation.from_matrix(Rp @ Rm.T).as_rotvec() / (2 * h)
        tau[j] = force @ dp + moment @ dtheta
    return tau


def flow_loss_reference(v, Z, eps, alpha, d_a, beta):
    """Straight-line recomputation of the chunked flow-matching loss."""
    v, Z, eps = (np.asarray(a, float) for a in (v, Z, eps))
    a = np.asarray(alpha, float)[:, None, None]
    Z_alpha = a * Z + (1 - a) * eps
    target = eps - Z
    diff = v - target
    la = float(np.sum(diff[..., :d_a] ** 2) / diff[..., :d_a].size)
    if Z.shape[-1] == d_a:
        return la, la, None, Z_alpha
    lt = float(np.sum(diff[..., d_a:] ** 2) / diff[..., d_a:].size)
    return la + beta * lt, la, lt, Z_alpha


def hsic_reference(X, Y):
    """Biased normalized HSIC with median-distance RBF kernels, written out directly."""
    def gram(A):
        A = np.asarray(A, float).reshape(len(A), -1)
        d2 = ((A[:, None, :] - A[None, :, :]) ** 2).sum(-1)
        iu = np.triu_indices(len(A), 1)
        s = np.median(np.sqrt(d2[iu]))
        return np.exp(-d2 / (2 * s * s))

    m = len(X)
    H = np.eye(m) - 1.0 / m
    K, L = H @ gram(X) @ H, H @ gram(Y) @ H
    return float(np.sum(K * L) / np.sqrt(np.sum(K * K) * np.sum(L * L)))
