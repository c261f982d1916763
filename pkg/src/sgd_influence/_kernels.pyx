# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled MLP kernels; same contract as ``_kernels_py``.

Each example is processed in scalar loops and its contribution is added to the
output in ascending row order. All loops run without the GIL.
"""
import numpy as np

from libc.math cimport exp, log, tanh
from libc.stdlib cimport malloc, free
from libc.string cimport memset


cdef struct Net:
    int n_layers
    int act
    int* dims
    Py_ssize_t* woff   # start of layer-l weights in theta
    Py_ssize_t* boff   # start of layer-l bias in theta
    Py_ssize_t* uoff   # start of unit layer l in per-example buffers
    Py_ssize_t units
    Py_ssize_t p


cdef int _net_init(Net* net, object dims, int act) except -1:
    cdef int L = len(dims) - 1
    cdef int l
    cdef Py_ssize_t off = 0, uo = 0
    net.n_layers = L
    net.act = act
    net.dims = <int*> malloc((L + 1) * sizeof(int))
    net.woff = <Py_ssize_t*> malloc(L * sizeof(Py_ssize_t))
    net.boff = <Py_ssize_t*> malloc(L * sizeof(Py_ssize_t))
    net.uoff = <Py_ssize_t*> malloc((L + 1) * sizeof(Py_ssize_t))
    if not (net.dims and net.woff and net.boff and net.uoff):
        _net_free(net)
        raise MemoryError()
    for l in range(L + 1):
        net.dims[l] = dims[l]
        net.uoff[l] = uo
        uo += dims[l]
    for l in range(L):
        net.woff[l] = off
        off += <Py_ssize_t> net.dims[l] * net.dims[l + 1]
        net.boff[l] = off
        off += net.dims[l + 1]
    net.units = uo
    net.p = off
    return 0


cdef void _net_free(Net* net):
    free(net.dims)
    free(net.woff)
    free(net.boff)
    free(net.uoff)
    net.dims = NULL
    net.woff = NULL
    net.boff = NULL
    net.uoff = NULL


cdef inline double _act(double z, int act) nogil:
    if act == 0:
        return z if z > 0.0 else 0.0
    return tanh(z)


cdef inline double _d1(double z, double a, int act) nogil:
    if act == 0:
        return 1.0 if z > 0.0 else 0.0
    return 1.0 - a * a


cdef inline double _d2(double z, double a, int act) nogil:
    if act == 0:
        return 0.0
    return -2.0 * a * (1.0 - a * a)


cdef void _forward(Net* net, const double* theta, const double* x, double* z, double* a) nogil:
    cdef int L = net.n_layers
    cdef int l, i, o, fi, fo
    cdef const double* w
    cdef const double* b
    cdef double s
    cdef double* ain
    for i in range(net.dims[0]):
        a[i] = x[i]
        z[i] = x[i]
    for l in range(L):
        fi = net.dims[l]
        fo = net.dims[l + 1]
        w = theta + net.woff[l]
        b = theta + net.boff[l]
        ain = a + net.uoff[l]
        for o in range(fo):
            s = b[o]
            for i in range(fi):
                s += ain[i] * w[i * fo + o]
            z[net.uoff[l + 1] + o] = s
            if l < L - 1:
                a[net.uoff[l + 1] + o] = _act(s, net.act)
            else:
                a[net.uoff[l + 1] + o] = s


cdef double _softmax_loss(Net* net, const double* z, long y, double* prob) nogil:
    # Writes softmax probabilities of the output layer, returns cross-entropy.
    cdef int C = net.dims[net.n_layers]
    cdef const double* zo = z + net.uoff[net.n_layers]
    cdef int o
    cdef double m = zo[0], s = 0.0
    for o in range(1, C):
        if zo[o] > m:
            m = zo[o]
    for o in range(C):
        prob[o] = exp(zo[o] - m)
        s += prob[o]
    for o in range(C):
        prob[o] /= s
    return m + log(s) - zo[y]


cdef void _backward(Net* net, const double* theta, const double* z, const double* a,
                    double* delta, double* out) nogil:
    # delta must hold the output-layer error on entry; adds the gradient to out.
    cdef int L = net.n_layers
    cdef int l, i, o, fi, fo
    cdef const double* w
    cdef double* dout
    cdef const double* ain
    cdef double* gw
    cdef double* gb
    cdef double s
    for l in range(L - 1, -1, -1):
        fi = net.dims[l]
        fo = net.dims[l + 1]
        w = theta + net.woff[l]
        gw = out + net.woff[l]
        gb = out + net.boff[l]
        dout = delta + net.uoff[l + 1]
        ain = a + net.uoff[l]
        for i in range(fi):
            for o in range(fo):
                gw[i * fo + o] += ain[i] * dout[o]
        for o in range(fo):
            gb[o] += dout[o]
        if l > 0:
            for i in range(fi):
                s = 0.0
                for o in range(fo):
                    s += w[i * fo + o] * dout[o]
                delta[net.uoff[l] + i] = _d1(z[net.uoff[l] + i], ain[i], net.act) * s


cdef void _hvp_one(Net* net, const double* theta, const double* v, const double* x, long y,
                   double* z, double* a, double* delta, double* rz, double* ra,
                   double* rdelta, double* prob, double* out) nogil:
    cdef int L = net.n_layers
    cdef int C = net.dims[L]
    cdef int l, i, o, fi, fo
    cdef const double* w
    cdef const double* vw
    cdef const double* vb
    cdef double s, rs, d1, pr
    cdef Py_ssize_t uo, ui
    _forward(net, theta, x, z, a)
    _softmax_loss(net, z, y, prob)
    for i in range(net.dims[0]):
        ra[i] = 0.0
    for l in range(L):
        fi = net.dims[l]
        fo = net.dims[l + 1]
        w = theta + net.woff[l]
        vw = v + net.woff[l]
        vb = v + net.boff[l]
        ui = net.uoff[l]
        uo = net.uoff[l + 1]
        for o in range(fo):
            s = vb[o]
            for i in range(fi):
                s += ra[ui + i] * w[i * fo + o] + a[ui + i] * vw[i * fo + o]
            rz[uo + o] = s
            if l < L - 1:
                ra[uo + o] = _d1(z[uo + o], a[uo + o], net.act) * s
    uo = net.uoff[L]
    pr = 0.0
    for o in range(C):
        pr += prob[o] * rz[uo + o]
    for o in range(C):
        delta[uo + o] = prob[o] - (1.0 if o == y else 0.0)
        rdelta[uo + o] = prob[o] * rz[uo + o] - prob[o] * pr
    for l in range(L - 1, -1, -1):
        fi = net.dims[l]
        fo = net.dims[l + 1]
        w = theta + net.woff[l]
        vw = v + net.woff[l]
        ui = net.uoff[l]
        uo = net.uoff[l + 1]
        for i in range(fi):
            for o in range(fo):
                out[net.woff[l] + i * fo + o] += ra[ui + i] * delta[uo + o] + a[ui + i] * rdelta[uo + o]
        for o in range(fo):
            out[net.boff[l] + o] += rdelta[uo + o]
        if l > 0:
            for i in range(fi):
                s = 0.0
                rs = 0.0
                for o in range(fo):
                    s += w[i * fo + o] * delta[uo + o]
                    rs += w[i * fo + o] * rdelta[uo + o] + vw[i * fo + o] * delta[uo + o]
                d1 = _d1(z[ui + i], a[ui + i], net.act)
                delta[ui + i] = d1 * s
                rdelta[ui + i] = d1 * rs + _d2(z[ui + i], a[ui + i], net.act) * rz[ui + i] * s


def _check(theta, dims, x, y=None):
    p = 0
    for fi, fo in zip(dims[:-1], dims[1:]):
        p += (fi + 1) * fo
    if theta.shape[0] != p:
        raise ValueError(f"parameter vector has length {theta.shape[0]}, model needs {p}")
    if x.shape[1] != dims[0]:
        raise ValueError(f"features have dimension {x.shape[1]}, model expects {dims[0]}")
    if y is not None and y.shape[0] != x.shape[0]:
        raise ValueError("features and labels disagree in length")


def logits(theta, dims, int act, x):
    cdef const double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    _check(th, dims, xv)
    cdef Net net
    _net_init(&net, dims, act)
    cdef Py_ssize_t n = xv.shape[0], r
    cdef int C = net.dims[net.n_layers], o
    out = np.empty((n, C), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double* z = <double*> malloc(net.units * sizeof(double))
    cdef double* a = <double*> malloc(net.units * sizeof(double))
    try:
        with nogil:
            for r in range(n):
                _forward(&net, &th[0], &xv[r, 0], z, a)
                for o in range(C):
                    ov[r, o] = a[net.uoff[net.n_layers] + o]
    finally:
        free(z)
        free(a)
        _net_free(&net)
    return out


def losses(theta, dims, int act, x, y):
    cdef const double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    _check(th, dims, xv, yv)
    cdef Net net
    _net_init(&net, dims, act)
    cdef Py_ssize_t n = xv.shape[0], r
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double* z = <double*> malloc(net.units * sizeof(double))
    cdef double* a = <double*> malloc(net.units * sizeof(double))
    cdef double* prob = <double*> malloc(net.dims[net.n_layers] * sizeof(double))
    try:
        with nogil:
            for r in range(n):
                _forward(&net, &th[0], &xv[r, 0], z, a)
                ov[r] = _softmax_loss(&net, z, yv[r], prob)
    finally:
        free(z)
        free(a)
        free(prob)
        _net_free(&net)
    return out


cdef void _grad_into(Net* net, const double* theta, const double* x, long y,
                     double* z, double* a, double* delta, double* prob,
                     double* out, double* loss) nogil:
    cdef int C = net.dims[net.n_layers]
    cdef Py_ssize_t uo = net.uoff[net.n_layers]
    cdef int o
    _forward(net, theta, x, z, a)
    loss[0] = _softmax_loss(net, z, y, prob)
    for o in range(C):
        delta[uo + o] = prob[o] - (1.0 if o == y else 0.0)
    _backward(net, theta, z, a, delta, out)


def per_example_grads(theta, dims, int act, x, y):
    cdef const double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    _check(th, dims, xv, yv)
    cdef Net net
    _net_init(&net, dims, act)
    cdef Py_ssize_t n = xv.shape[0], r
    out = np.zeros((n, net.p), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double loss
    cdef double* z = <double*> malloc(net.units * sizeof(double))
    cdef double* a = <double*> malloc(net.units * sizeof(double))
    cdef double* delta = <double*> malloc(net.units * sizeof(double))
    cdef double* prob = <double*> malloc(net.dims[net.n_layers] * sizeof(double))
    try:
        with nogil:
            for r in range(n):
                _grad_into(&net, &th[0], &xv[r, 0], yv[r], z, a, delta, prob, &ov[r, 0], &loss)
    finally:
        free(z)
        free(a)
        free(delta)
        free(prob)
        _net_free(&net)
    return out


def grad_sum(theta, dims, int act, x, y):
    """Return ``(sum of losses, sum of per-example gradients)``."""
    cdef const double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    _check(th, dims, xv, yv)
    cdef Net net
    _net_init(&net, dims, act)
    cdef Py_ssize_t n = xv.shape[0], r, k
    out = np.zeros(net.p, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double loss, total = 0.0
    cdef double* g = <double*> malloc(net.p * sizeof(double))
    cdef double* z = <double*> malloc(net.units * sizeof(double))
    cdef double* a = <double*> malloc(net.units * sizeof(double))
    cdef double* delta = <double*> malloc(net.units * sizeof(double))
    cdef double* prob = <double*> malloc(net.dims[net.n_layers] * sizeof(double))
    try:
        with nogil:
            for r in range(n):
                memset(g, 0, net.p * sizeof(double))
                _grad_into(&net, &th[0], &xv[r, 0], yv[r], z, a, delta, prob, g, &loss)
                total += loss
                for k in range(net.p):
                    ov[k] += g[k]
    finally:
        free(g)
        free(z)
        free(a)
        free(delta)
        free(prob)
        _net_free(&net)
    return total, out


def hvp_sum(theta, dims, int act, x, y, v):
    """Sum over rows of ``hess(loss_i) @ v`` by forward-over-reverse R-propagation."""
    cdef const double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef const double[::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    _check(th, dims, xv, yv)
    if vv.shape[0] != th.shape[0]:
        raise ValueError("direction and parameters disagree in length")
    cdef Net net
    _net_init(&net, dims, act)
    cdef Py_ssize_t n = xv.shape[0], r, k
    out = np.zeros(net.p, dtype=np.float64)
    cdef double[::1] ov = out
    cdef Py_ssize_t U = net.units
    cdef double* h = <double*> malloc(net.p * sizeof(double))
    cdef double* buf = <double*> malloc(6 * U * sizeof(double))
    cdef double* prob = <double*> malloc(net.dims[net.n_layers] * sizeof(double))
    try:
        with nogil:
            for r in range(n):
                memset(h, 0, net.p * sizeof(double))
                _hvp_one(&net, &th[0], &vv[0], &xv[r, 0], yv[r],
                         buf, buf + U, buf + 2 * U, buf + 3 * U, buf + 4 * U, buf + 5 * U,
                         prob, h)
                for k in range(net.p):
                    ov[k] += h[k]
    finally:
        free(h)
        free(buf)
        free(prob)
        _net_free(&net)
    return out
