"""Independent reference implementations written with plain Python loops.

They share no code with the package beyond being handed the same numbers.
"""
import math


def triple_loop_matmul(a, b):
    m, k, n = len(a), len(b), len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i][p] * b[p][j]
            out[i][j] = s
    return out


def trapezoid(f, lo, hi, n):
    h = (hi - lo) / n
    s = 0.5 * (f(lo) + f(hi))
    for i in range(1, n):
        s += f(lo + i * h)
    return s * h


def phi_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _rect(u, th, k):
    return 1.0 / k if abs(u - th) <= k / 2.0 else 0.0


def naive_loss_and_grads(weights, x, labels, T, tau, v_th, kappa, smoothing, detach_reset=True):
    """Fixed-threshold LIF MLP, forward and BPTT one sample at a time.

    ``weights`` is a list of (out, in) nested lists; the last one is the
    non-spiking readout. Returns (mean loss, per-layer weight grads).
    """
    L = len(weights)
    B = len(x)
    grads = [[[0.0] * len(w[0]) for _ in w] for w in weights]
    total = 0.0
    for b in range(B):
        inputs = [[list(x[b]) for _ in range(T)]]  # inputs[l][t][j]
        Us, Ss = [], []
        for l in range(L - 1):
            w = weights[l]
            n = len(w)
            U = [[0.0] * n for _ in range(T)]
            S = [[0.0] * n for _ in range(T)]
            for i in range(n):
                u_prev, s_prev = 0.0, 0.0
                for t in range(T):
                    cur = 0.0
                    for j in range(len(w[i])):
                        cur += w[i][j] * inputs[l][t][j]
                    u = tau * u_prev * (1.0 - s_prev) + cur
                    s = 1.0 if u >= v_th else 0.0
                    U[t][i], S[t][i] = u, s
                    u_prev, s_prev = u, s
            Us.append(U)
            Ss.append(S)
            inputs.append(S)
        W = weights[-1]
        C = len(W)
        h = inputs[-1]
        logits = []
        for c in range(C):
            s = 0.0
            for t in range(T):
                for j in range(len(W[c])):
                    s += W[c][j] * h[t][j]
            logits.append(s / T)
        mx = max(logits)
        z = sum(math.exp(v - mx) for v in logits)
        logp = [v - mx - math.log(z) for v in logits]
        target = [smoothing / C + (1.0 - smoothing if c == labels[b] else 0.0) for c in range(C)]
        total += -sum(tc * lp for tc, lp in zip(target, logp))
        dlog = [(math.exp(lp) - tc) / B for lp, tc in zip(logp, target)]
        for c in range(C):
            for j in range(len(W[c])):
                grads[-1][c][j] += dlog[c] * sum(h[t][j] for t in range(T)) / T
        # dL/dS of the last hidden layer
        gS = [[sum(dlog[c] * W[c][j] for c in range(C)) / T for j in range(len(W[0]))] for _ in range(T)]
        for l in range(L - 2, -1, -1):
            w, U, S = weights[l], Us[l], Ss[l]
            n = len(w)
            dU = [[0.0] * n for _ in range(T)]
            for i in range(n):
                for t in range(T - 1, -1, -1):
                    ds = gS[t][i]
                    if t < T - 1 and not detach_reset:
                        ds += dU[t + 1][i] * (-tau * U[t][i])
                    d = ds * _rect(U[t][i], v_th, kappa)
                    if t < T - 1:
                        d += dU[t + 1][i] * tau * (1.0 - S[t][i])
                    dU[t][i] = d
            for i in range(n):
                for j in range(len(w[i])):
                    grads[l][i][j] += sum(dU[t][i] * inputs[l][t][j] for t in range(T))
            gS = [[sum(dU[t][i] * w[i][j] for i in range(n)) for j in range(len(w[0]))] for t in range(T)]
    return total / B, grads
