/*
 * Cross-process atomics and memory-copy kernels operating on Python
 * buffers (mmap objects, bytearrays, ...).  Every entry point takes a
 * buffer plus a byte offset so callers never handle raw addresses.
 */
#define PY_SSIZE_T_CLEAN
#include <Python.h>
#include <stdint.h>
#include <string.h>

/* keep gcc from turning the hand-written loops back into memcpy calls */
#pragma GCC optimize("no-tree-loop-distribute-patterns")

static void *
checked_ptr(Py_buffer *view, Py_ssize_t off, Py_ssize_t width)
{
    if (off < 0 || width < 0 || off > view->len - width) {
        PyErr_Format(PyExc_IndexError,
                     "access [%zd, %zd) outside buffer of %zd bytes",
                     off, off + width, view->len);
        return NULL;
    }
    return (char *)view->buf + off;
}

static void *
atomic_ptr(Py_buffer *view, Py_ssize_t off, int width)
{
    void *p;
    if (width != 4 && width != 8) {
        PyErr_Format(PyExc_ValueError, "unsupported atomic width %d", width);
        return NULL;
    }
    p = checked_ptr(view, off, width);
    if (p == NULL)
        return NULL;
    if (((uintptr_t)p) % width) {
        PyErr_Format(PyExc_ValueError,
                     "offset %zd is not %d-byte aligned", off, width);
        return NULL;
    }
    return p;
}

static PyObject *
atomic_load(PyObject *self, PyObject *args)
{
    Py_buffer view;
    Py_ssize_t off;
    int width = 8;
    long long out;
    void *p;

    if (!PyArg_ParseTuple(args, "w*n|i", &view, &off, &width))
        return NULL;
    p = atomic_ptr(&view, off, width);
    if (p == NULL) {
        PyBuffer_Release(&view);
        return NULL;
    }
    if (width == 4)
        out = __atomic_load_n((int32_t *)p, __ATOMIC_SEQ_CST);
    else
        out = __atomic_load_n((int64_t *)p, __ATOMIC_SEQ_CST);
    PyBuffer_Release(&view);
    return PyLong_FromLongLong(out);
}

static PyObject *
atomic_store(PyObject *self, PyObject *args)
{
    Py_buffer view;
    Py_ssize_t off;
    long long value;
    int width = 8;
    void *p;

    if (!PyArg_ParseTuple(args, "w*nL|i", &view, &off, &value, &width))
        return NULL;
    p = atomic_ptr(&view, off, width);
    if (p == NULL) {
        PyBuffer_Release(&view);
        return NULL;
    }
    if (width == 4)
        __atomic_store_n((int32_t *)p, (int32_t)value, __ATOMIC_SEQ_CST);
    else
        __atomic_store_n((int64_t *)p, (int64_t)value, __ATOMIC_SEQ_CST);
    PyBuffer_Release(&view);
    Py_RETURN_NONE;
}

static PyObject *
atomic_fetch_add(PyObject *self, PyObject *args)
{
    Py_buffer view;
    Py_ssize_t off;
    long long delta, out;
    int width = 8;
    void *p;

    if (!PyArg_ParseTuple(args, "w*nL|i", &view, &off, &delta, &width))
        return NULL;
    p = atomic_ptr(&view, off, width);
    if (p == NULL) {
        PyBuffer_Release(&view);
        return NULL;
    }
    if (width == 4)
        out = __atomic_fetch_add((int32_t *)p, (int32_t)delta, __ATOMIC_SEQ_CST);
    else
        out = __atomic_fetch_add((int64_t *)p, (int64_t)delta, __ATOMIC_SEQ_CST);
    PyBuffer_Release(&view);
    return PyLong_FromLongLong(out);
}

static PyObject *
atomic_exchange(PyObject *self, PyObject *args)
{
    Py_buffer view;
    Py_ssize_t off;
    long long value, out;
    int width = 8;
    void *p;

    if (!PyArg_ParseTuple(args, "w*nL|i", &view, &off, &value, &width))
        return NULL;
    p = atomic_ptr(&view, off, width);
    if (p == NULL) {
        PyBuffer_Release(&view);
        return NULL;
    }
    if (width == 4)
        out = __atomic_exchange_n((int32_t *)p, (int32_t)value, __ATOMIC_SEQ_CST);
    else
        out = __atomic_exchange_n((int64_t *)p, (int64_t)value, __ATOMIC_SEQ_CST);
    PyBuffer_Release(&view);
    return PyLong_FromLongLong(out);
}

/* Returns the value observed before the operation; success iff it equals
 * `expected`. */
static PyObject *
atomic_compare_exchange(PyObject *self, PyObject *args)
{
    Py_buffer view;
    Py_ssize_t off;
    long long expected, desired;
    int width = 8;
    void *p;

    if (!PyArg_ParseTuple(args, "w*nLL|i", &view, &off, &expected, &desired,
                          &width))
        return NULL;
    p = atomic_ptr(&view, off, width);
    if (p == NULL) {
        PyBuffer_Release(&view);
        return NULL;
    }
    if (width == 4) {
        int32_t e = (int32_t)expected;
        __atomic_compare_exchange_n((int32_t *)p, &e, (int32_t)desired, 0,
                                    __ATOMIC_SEQ_CST, __ATOMIC_SEQ_CST);
        expected = e;
    } else {
        int64_t e = (int64_t)expected;
        __atomic_compare_exchange_n((int64_t *)p, &e, (int64_t)desired, 0,
                                    __ATOMIC_SEQ_CST, __ATOMIC_SEQ_CST);
        expected = e;
    }
    PyBuffer_Release(&view);
    return PyLong_FromLongLong(expected);
}

/* ---- copy kernels ------------------------------------------------------ */

typedef void (*copy_fn)(unsigned char *, const unsigned char *, size_t);

static void
kernel_default(unsigned char *dst, const unsigned char *src, size_t n)
{
    memcpy(dst, src, n);
}

static void
kernel_byteloop(unsigned char *dst, const unsigned char *src, size_t n)
{
    volatile unsigned char *d = dst;
    size_t i;
    for (i = 0; i < n; i++)
        d[i] = src[i];
}

/* 64-byte blocks of 8-byte words; byte head aligns dst, byte tail
 * finishes.  src may stay unaligned, hence the memcpy word loads. */
static void
kernel_wideblock(unsigned char *dst, const unsigned char *src, size_t n)
{
    uint64_t w0, w1, w2, w3, w4, w5, w6, w7;

    while (n && ((uintptr_t)dst & 7)) {
        *dst++ = *src++;
        n--;
    }
    while (n >= 64) {
        memcpy(&w0, src, 8);
        memcpy(&w1, src + 8, 8);
        memcpy(&w2, src + 16, 8);
        memcpy(&w3, src + 24, 8);
        memcpy(&w4, src + 32, 8);
        memcpy(&w5, src + 40, 8);
        memcpy(&w6, src + 48, 8);
        memcpy(&w7, src + 56, 8);
        ((uint64_t *)dst)[0] = w0;
        ((uint64_t *)dst)[1] = w1;
        ((uint64_t *)dst)[2] = w2;
        ((uint64_t *)dst)[3] = w3;
        ((uint64_t *)dst)[4] = w4;
        ((uint64_t *)dst)[5] = w5;
        ((uint64_t *)dst)[6] = w6;
        ((uint64_t *)dst)[7] = w7;
        dst += 64;
        src += 64;
        n -= 64;
    }
    while (n >= 8) {
        memcpy(&w0, src, 8);
        *(uint64_t *)dst = w0;
        dst += 8;
        src += 8;
        n -= 8;
    }
    while (n--)
        *dst++ = *src++;
}

static PyObject *
run_copy(PyObject *args, copy_fn fn)
{
    Py_buffer dview, sview;
    Py_ssize_t doff, soff, n;
    unsigned char *d;
    const unsigned char *s;

    if (!PyArg_ParseTuple(args, "w*ny*nn", &dview, &doff, &sview, &soff, &n))
        return NULL;
    d = checked_ptr(&dview, doff, n);
    s = d ? checked_ptr(&sview, soff, n) : NULL;
    if (d == NULL || s == NULL) {
        PyBuffer_Release(&dview);
        PyBuffer_Release(&sview);
        return NULL;
    }
    if (n > 0) {
        if (d < s + n && s < d + n) {
            PyBuffer_Release(&dview);
            PyBuffer_Release(&sview);
            PyErr_SetString(PyExc_ValueError, "overlapping copy regions");
            return NULL;
        }
        if (n >= 65536) {
            Py_BEGIN_ALLOW_THREADS
            fn(d, s, (size_t)n);
            Py_END_ALLOW_THREADS
        } else {
            fn(d, s, (size_t)n);
        }
    }
    PyBuffer_Release(&dview);
    PyBuffer_Release(&sview);
    Py_RETURN_NONE;
}

static PyObject *
copy_default(PyObject *self, PyObject *args)
{
    return run_copy(args, kernel_default);
}

static PyObject *
copy_byteloop(PyObject *self, PyObject *args)
{
    return run_copy(args, kernel_byteloop);
}

static PyObject *
copy_wideblock(PyObject *self, PyObject *args)
{
    return run_copy(args, kernel_wideblock);
}

static PyMethodDef native_methods[] = {
    {"atomic_load", atomic_load, METH_VARARGS,
     "atomic_load(buf, off, width=8) -> int"},
    {"atomic_store", atomic_store, METH_VARARGS,
     "atomic_store(buf, off, value, width=8)"},
    {"atomic_fetch_add", atomic_fetch_add, METH_VARARGS,
     "atomic_fetch_add(buf, off, delta, width=8) -> previous value"},
    {"atomic_exchange", atomic_exchange, METH_VARARGS,
     "atomic_exchange(buf, off, value, width=8) -> previous value"},
    {"atomic_compare_exchange", atomic_compare_exchange, METH_VARARGS,
     "atomic_compare_exchange(buf, off, expected, desired, width=8) -> "
     "previous value"},
    {"copy_default", copy_default, METH_VARARGS,
     "copy_default(dst, dst_off, src, src_off, n): libc memcpy"},
    {"copy_byteloop", copy_byteloop, METH_VARARGS,
     "copy_byteloop(dst, dst_off, src, src_off, n): one byte per iteration"},
    {"copy_wideblock", copy_wideblock, METH_VARARGS,
     "copy_wideblock(dst, dst_off, src, src_off, n): 64-byte word blocks"},
    {NULL, NULL, 0, NULL}
};

static struct PyModuleDef native_module = {
    PyModuleDef_HEAD_INIT, "_native", NULL, -1, native_methods
};

PyMODINIT_FUNC
PyInit__native(void)
{
    return PyModule_Create(&native_module);
}
