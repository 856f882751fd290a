"""Independent reference values frozen into the C++ unit tests.

Plain-Python evaluations of the defining formulas; rerun to regenerate.
"""
import math
import struct


def gelu(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def layer_norm(x, g, b, eps):
    m = sum(x) / len(x)
    v = sum((t - m) ** 2 for t in x) / len(x)
    return [gi * (t - m) / math.sqrt(v + eps) + bi for t, gi, bi in zip(x, g, b)]


def softmax(v):
    m = max(v)
    e = [math.exp(t - m) for t in v]
    s = sum(e)
    return [t / s for t in e]


def tlt1(dims, dtype, payload):
    head = b"TLT1" + bytes([len(dims)]) + b"".join(struct.pack("<I", d) for d in dims) + bytes([dtype])
    return head + payload


def hexs(b):
    return " ".join(f"{c:02x}" for c in b)


print("gelu", repr(gelu(3.0)), repr(gelu(-3.0)), repr(gelu(1.0)), repr(gelu(-1.0)), repr(gelu(0.3)))
print("tlt1 1x1 f32", hexs(tlt1([1, 1], 0, struct.pack("<f", 0.0))))
print("tlt1 2x2 u8", hexs(tlt1([2, 2], 2, bytes([1, 2, 3, 4]))))
print("tlt1 3 f64 [1.5,-2,0.25]", hexs(tlt1([3], 1, struct.pack("<3d", 1.5, -2.0, 0.25))))

print("layer_norm", [repr(t) for t in layer_norm([1.0, 2.0, 4.0], [1.0, 0.5, 2.0], [0.0, 1.0, -1.0], 1e-5)])
print("softmax [ln1, ln3]", softmax([math.log(1), math.log(3)]))
print("softmax [1,2,3]", [repr(t) for t in softmax([1.0, 2.0, 3.0])])

# 2-token scalar attention, all maps 1, Z = [[0],[1]].
z = [0.0, 1.0]
out = []
for a in range(2):
    p = softmax([z[a] * z[b] for b in range(2)])
    out.append(sum(p[b] * z[b] for b in range(2)))
print("attention 2-token", [repr(t) for t in out])

# mlp_block, d=1, d_ff=4: LN of a single value is beta.
gamma, beta = 2.0, 0.3
w1 = [0.5, -1.0, 2.0, 0.1]
b1 = [0.1, 0.2, -0.3, 0.0]
w2 = [1.0, -0.5, 0.25, 2.0]
b2 = 0.05
zin = 1.7
h = [gelu(w * beta + bb) for w, bb in zip(w1, b1)]
print("mlp_block d=1", repr(zin + (sum(a * b for a, b in zip(h, w2)) + b2)))

# msa_block on one token, d=2, h=1: softmax weight 1, so out = LN(z) Wv Wo + bo + z.
zt = [0.4, -1.2]
n = layer_norm(zt, [1.5, 0.5], [0.1, -0.2], 1e-5)
wv = [[0.3, -0.7], [1.1, 0.2]]  # input x output
wo = [[0.5, 0.25], [-1.0, 2.0]]
bo = [0.01, -0.02]
v = [sum(n[i] * wv[i][c] for i in range(2)) for c in range(2)]
o = [sum(v[i] * wo[i][c] for i in range(2)) + bo[c] + zt[c] for c in range(2)]
print("msa_block 1 token", [repr(t) for t in o])

# CLAM d=1, N=1, l=1.
x, a, b, A, B = 0.8, 1.5, -0.2, -0.7, 0.4
print("clam scalar", repr(gelu(A * gelu(a * x + b) + B)))

# TLAM l=0, N=2, d=2: tokens gelu(A x + b) + p averaged.
def token(A, x, b, p):
    return [gelu(sum(A[o][i] * x[i] for i in range(len(x))) + b[o]) + p[o] for o in range(len(b))]
t1 = token([[1.0], [-2.0]], [0.5], [0.1, 0.0], [0.01, -0.02])
t2 = token([[0.5, 0.5], [1.0, -1.0]], [1.0, 3.0], [0.0, 0.2], [0.03, 0.0])
print("tlam l0 N2", [repr((p + q) / 2) for p, q in zip(t1, t2)])

# Generator head, d=1, d_g=1.
zz, W1, B1, W2, B2 = 0.6, 1.3, -0.1, [0.5, -1.0, 2.0], [0.0, 0.1, -0.2]
hh = gelu(W1 * zz + B1)
print("generate scalar", [repr(W2[c] * hh + B2[c]) for c in range(3)])

# Discriminator, d=1, d_c=1 on one pixel with rgb.
rgb = [0.2, 0.4, 0.9]
Wc1 = [0.3, -0.5, 0.7, 1.1]  # over [z, r, g, b]
bc1, wc2, bc2 = 0.05, -1.5, 0.25
s = wc2 * gelu(sum(w * t for w, t in zip(Wc1, [zz] + rgb)) + bc1) + bc2
print("disc scalar", repr(s))

# Adam, beta1=0, beta2=0.999, lr 0.1, constant g=0.5, theta0=1, two steps.
th, m, vv = 1.0, 0.0, 0.0
for t in (1, 2):
    g = 0.5
    m = 0.0 * m + 1.0 * g
    vv = 0.999 * vv + (1 - 0.999) * g * g
    mh = m / (1 - 0.0 ** t)
    vh = vv / (1 - 0.999 ** t)
    th = th - 0.1 * mh / (math.sqrt(vh) + 1e-8)
    print("adam step", t, repr(th))

print("ppm 0.5 ->", math.floor(0.5 * 255 + 0.5))
