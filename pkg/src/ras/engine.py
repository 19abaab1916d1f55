"""Batched dense forward/backward engine for the toy transformer.

This is the reference "no index-set machinery" path: every patch of every
image goes through the network. It doubles as the training engine, with
reverse-mode gradients written out by hand for the fixed architecture (no
external autodiff). Both paths — this one and the selective cache-aware one in
``model`` — share the same kernels and elementwise helpers, so a full-active
selective forward reproduces this forward bit-for-bit.

All matmuls run through the deterministic kernels, so training and inference
are bit-reproducible for a fixed seed regardless of thread count.
"""

from __future__ import annotations

import numpy as np

from . import _kernels_nb as _nb
from ._ops import silu, silu_grad, gelu_fwd, gelu_grad, time_features, TIME_EMBED_DIM
from .errors import ShapeError
from .flops import FlopCounter
from .model import DitModel, ModelConfig, RMS_EPS, image_to_patches, patches_to_image


def _mm(a, b):
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    _nb.gemm_acc(a, b, out)
    return out


def _mm_nt(a, b):
    # a @ b.T via an explicit transpose: the kij kernel vectorizes its inner
    # loop, a strict dot-product reduction would not; bit-identical either way.
    out = np.zeros((a.shape[0], b.shape[0]), dtype=a.dtype)
    _nb.gemm_acc(a, np.ascontiguousarray(b.T), out)
    return out


def _mm_tn(a, b):
    out = np.zeros((a.shape[1], b.shape[1]), dtype=a.dtype)
    _nb.gemm_acc(np.ascontiguousarray(a.T), b, out)
    return out


def _bmm(a, b):
    out = np.zeros((a.shape[0], a.shape[1], b.shape[2]), dtype=a.dtype)
    _nb.bmm_nn(a, b, out)
    return out


def _bmm_nt(a, b):
    out = np.zeros((a.shape[0], a.shape[1], b.shape[1]), dtype=a.dtype)
    _nb.bmm_nn(a, np.ascontiguousarray(b.transpose(0, 2, 1)), out)
    return out


def _bmm_tn(a, b):
    out = np.zeros((a.shape[0], a.shape[2], b.shape[2]), dtype=a.dtype)
    _nb.bmm_nn(np.ascontiguousarray(a.transpose(0, 2, 1)), b, out)
    return out


def _rmsnorm(x):
    out = np.empty_like(x)
    inv = np.empty(x.shape[0], dtype=x.dtype)
    _nb.rmsnorm_rows(x, RMS_EPS, out, inv)
    return out, inv


def _rmsnorm_back(dy, x, inv):
    # dx_j = r*dy_j - x_j * r^3 * sum_i(dy_i x_i) / n, per row
    n = x.shape[1]
    r = inv[:, None]
    s = np.sum(dy * x, axis=1, keepdims=True)
    return r * dy - x * (r * r * r) * (s / x.dtype.type(n))


def batch_to_patch_matrix(cfg: ModelConfig, images: np.ndarray) -> np.ndarray:
    b = images.shape[0]
    p = cfg.patch_size
    return np.ascontiguousarray(
        images.reshape(b, cfg.channels, cfg.grid_h, p, cfg.grid_w, p)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(b * cfg.num_patches, cfg.patch_dim))


def patch_matrix_to_batch(cfg: ModelConfig, mat: np.ndarray, batch: int) -> np.ndarray:
    p = cfg.patch_size
    return np.ascontiguousarray(
        mat.reshape(batch, cfg.grid_h, cfg.grid_w, cfg.channels, p, p)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(batch, cfg.channels, cfg.image_h, cfg.image_w))


def forward_batch(model: DitModel, images: np.ndarray, sigmas, class_ids=None,
                  want_tape: bool = False, flops: FlopCounter | None = None):
    """Dense forward over a batch of images at per-sample noise levels.

    Args:
        images: (B, C, H, W) samples.
        sigmas: (B,) noise levels in [0, 1].
        class_ids: (B,) int labels, required for conditional models.
        want_tape: record every intermediate needed by ``backward_batch``.

    Returns:
        (B, C, H, W) velocity predictions, or ``(out, tape)`` with a tape.
    """
    cfg = model.cfg
    prm = model.params
    dt = model.dtype
    one = dt.type(1)
    b = images.shape[0]
    if images.shape[1:] != (cfg.channels, cfg.image_h, cfg.image_w):
        raise ShapeError(f"batch shape {images.shape} does not match config")
    np_, d, nh, hd = cfg.num_patches, cfg.hidden_dim, cfg.heads, cfg.head_dim
    scale = dt.type(1.0 / np.sqrt(float(hd)))
    pos_all = np.arange(np_, dtype=np.int64)

    x_raw = batch_to_patch_matrix(cfg, np.ascontiguousarray(images, dtype=dt))
    x = _mm(x_raw, prm["patch_embed.w"]) + prm["patch_embed.b"]

    tf = time_features(np.asarray(sigmas, dtype=np.float64), dtype=dt)
    if tf.shape[0] != b:
        raise ShapeError("sigmas length must match the batch")
    th = _mm(tf, prm["time_mlp.w1"]) + prm["time_mlp.b1"]
    ta = silu(th)
    temb = _mm(ta, prm["time_mlp.w2"]) + prm["time_mlp.b2"]
    cond = temb
    ids = None
    if cfg.num_classes:
        if class_ids is None:
            raise ShapeError("class_ids required for a class-conditional model")
        ids = np.atleast_1d(np.asarray(class_ids, dtype=np.int64))
        cond = temb + prm["class_embed.table"][ids]
    cond_act = silu(cond)
    if flops is not None:
        flops.add("cond", 2 * b * TIME_EMBED_DIM * d + 2 * b * d * d)

    tape = {
        "batch": b, "x_raw": x_raw, "tf": tf, "th": th, "ta": ta, "cond": cond,
        "cond_act": cond_act, "ids": ids, "layers": [],
    } if want_tape else None

    for l in range(cfg.layers):
        mod = _mm(cond_act, prm[f"blocks.{l}.mod.w"]) + prm[f"blocks.{l}.mod.b"]
        if flops is not None:
            flops.add("cond", 2 * b * d * 6 * d)
        sh1, sc1, g1, sh2, sc2, g2 = [mod[:, i * d:(i + 1) * d][:, None, :] for i in range(6)]

        x_in = x
        n1, inv1 = _rmsnorm(x)
        h1 = (n1.reshape(b, np_, d) * (sc1 + one) + sh1).reshape(b * np_, d)

        qkv = _mm(h1, prm[f"blocks.{l}.qkv.w"]) + prm[f"blocks.{l}.qkv.b"]
        if flops is not None:
            flops.add("token_linear", 2 * b * np_ * d * 3 * d)

        def _heads(m):
            return np.ascontiguousarray(m.reshape(b, np_, nh, hd).transpose(0, 2, 1, 3))

        q = model.rope.apply(_heads(qkv[:, :d]), pos_all)
        k = model.rope.apply(_heads(qkv[:, d:2 * d]), pos_all)
        v = _heads(qkv[:, 2 * d:])

        scores = _bmm_nt(q.reshape(b * nh, np_, hd), k.reshape(b * nh, np_, hd))
        scores *= scale
        probs2d = np.empty((b * nh * np_, np_), dtype=dt)
        _nb.softmax_rows(scores.reshape(b * nh * np_, np_), probs2d)
        probs = probs2d.reshape(b * nh, np_, np_)
        attn = _bmm(probs, v.reshape(b * nh, np_, hd))
        attn_c = np.ascontiguousarray(
            attn.reshape(b, nh, np_, hd).transpose(0, 2, 1, 3)).reshape(b * np_, d)
        if flops is not None:
            flops.add("attention", 4 * b * np_ * np_ * d)

        o = _mm(attn_c, prm[f"blocks.{l}.out.w"]) + prm[f"blocks.{l}.out.b"]
        if flops is not None:
            flops.add("token_linear", 2 * b * np_ * d * d)
        x = (x_in.reshape(b, np_, d) + g1 * o.reshape(b, np_, d)).reshape(b * np_, d)

        x_mid = x
        n2, inv2 = _rmsnorm(x)
        h2 = (n2.reshape(b, np_, d) * (sc2 + one) + sh2).reshape(b * np_, d)
        f1_pre = _mm(h2, prm[f"blocks.{l}.mlp.w1"]) + prm[f"blocks.{l}.mlp.b1"]
        f1, gelu_t = gelu_fwd(f1_pre)
        mlp = _mm(f1, prm[f"blocks.{l}.mlp.w2"]) + prm[f"blocks.{l}.mlp.b2"]
        if flops is not None:
            flops.add("token_linear", 4 * b * np_ * d * cfg.mlp_ratio * d)
        x = (x_mid.reshape(b, np_, d) + g2 * mlp.reshape(b, np_, d)).reshape(b * np_, d)

        if tape is not None:
            tape["layers"].append({
                "mod": mod, "x_in": x_in, "n1": n1, "inv1": inv1, "h1": h1,
                "q": q, "k": k, "v": v, "probs": probs, "attn_c": attn_c, "o": o,
                "x_mid": x_mid, "n2": n2, "inv2": inv2, "h2": h2,
                "f1_pre": f1_pre, "f1": f1, "gelu_t": gelu_t, "mlp": mlp,
            })

    fmod = _mm(cond_act, prm["final.mod.w"]) + prm["final.mod.b"]
    fsh, fsc = fmod[:, None, :d], fmod[:, None, d:]
    nf, invf = _rmsnorm(x)
    hf = (nf.reshape(b, np_, d) * (fsc + one) + fsh).reshape(b * np_, d)
    out = _mm(hf, prm["final.out.w"]) + prm["final.out.b"]
    if flops is not None:
        flops.add("cond", 2 * b * d * 2 * d)
        flops.add("token_linear", 2 * b * np_ * d * cfg.patch_dim)

    out_images = patch_matrix_to_batch(cfg, out, b)
    if tape is None:
        return out_images
    tape.update({"fmod": fmod, "x_last": x, "nf": nf, "invf": invf, "hf": hf})
    return out_images, tape


def backward_batch(model: DitModel, tape: dict, d_out_images: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given d(loss)/d(output)."""
    cfg = model.cfg
    prm = model.params
    dt = model.dtype
    one = dt.type(1)
    b = tape["batch"]
    np_, d, nh, hd = cfg.num_patches, cfg.hidden_dim, cfg.heads, cfg.head_dim
    scale = dt.type(1.0 / np.sqrt(float(hd)))
    pos_all = np.arange(np_, dtype=np.int64)
    grads: dict[str, np.ndarray] = {}

    d_out = batch_to_patch_matrix(cfg, np.ascontiguousarray(d_out_images, dtype=dt))

    # final projection and modulated norm
    grads["final.out.w"] = _mm_tn(tape["hf"], d_out)
    grads["final.out.b"] = np.sum(d_out, axis=0)
    dhf = _mm_nt(d_out, prm["final.out.w"]).reshape(b, np_, d)
    fsh, fsc = tape["fmod"][:, None, :d], tape["fmod"][:, None, d:]
    nf3 = tape["nf"].reshape(b, np_, d)
    dnf = (dhf * (fsc + one)).reshape(b * np_, d)
    dfsc = np.sum(dhf * nf3, axis=1)
    dfsh = np.sum(dhf, axis=1)
    dfmod = np.concatenate([dfsh, dfsc], axis=1)
    grads["final.mod.w"] = _mm_tn(tape["cond_act"], dfmod)
    grads["final.mod.b"] = np.sum(dfmod, axis=0)
    dcond_act = _mm_nt(dfmod, prm["final.mod.w"])
    dx = _rmsnorm_back(dnf, tape["x_last"], tape["invf"])

    for l in range(cfg.layers - 1, -1, -1):
        t = tape["layers"][l]
        mod = t["mod"]
        sh1, sc1, g1, sh2, sc2, g2 = [mod[:, i * d:(i + 1) * d][:, None, :] for i in range(6)]
        dx3 = dx.reshape(b, np_, d)

        # MLP residual: x = x_mid + g2 * mlp
        mlp3 = t["mlp"].reshape(b, np_, d)
        dmlp = (dx3 * g2).reshape(b * np_, d)
        dg2 = np.sum(dx3 * mlp3, axis=1)
        grads[f"blocks.{l}.mlp.w2"] = _mm_tn(t["f1"], dmlp)
        grads[f"blocks.{l}.mlp.b2"] = np.sum(dmlp, axis=0)
        df1 = _mm_nt(dmlp, prm[f"blocks.{l}.mlp.w2"])
        df1_pre = df1 * gelu_grad(t["f1_pre"], t["gelu_t"])
        grads[f"blocks.{l}.mlp.w1"] = _mm_tn(t["h2"], df1_pre)
        grads[f"blocks.{l}.mlp.b1"] = np.sum(df1_pre, axis=0)
        dh2 = _mm_nt(df1_pre, prm[f"blocks.{l}.mlp.w1"]).reshape(b, np_, d)

        n2_3 = t["n2"].reshape(b, np_, d)
        dn2 = (dh2 * (sc2 + one)).reshape(b * np_, d)
        dsc2 = np.sum(dh2 * n2_3, axis=1)
        dsh2 = np.sum(dh2, axis=1)
        dx_mid = dx + _rmsnorm_back(dn2, t["x_mid"], t["inv2"])

        # attention residual: x_mid = x_in + g1 * o
        dxm3 = dx_mid.reshape(b, np_, d)
        o3 = t["o"].reshape(b, np_, d)
        do = (dxm3 * g1).reshape(b * np_, d)
        dg1 = np.sum(dxm3 * o3, axis=1)
        grads[f"blocks.{l}.out.w"] = _mm_tn(t["attn_c"], do)
        grads[f"blocks.{l}.out.b"] = np.sum(do, axis=0)
        dattn_c = _mm_nt(do, prm[f"blocks.{l}.out.w"])

        dattn = np.ascontiguousarray(
            dattn_c.reshape(b, np_, nh, hd).transpose(0, 2, 1, 3)).reshape(b * nh, np_, hd)
        probs = t["probs"]
        v = t["v"].reshape(b * nh, np_, hd)
        dprobs = _bmm_nt(dattn, v)
        dv = _bmm_tn(probs, dattn)
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=2, keepdims=True))
        dscores *= scale
        q = t["q"].reshape(b * nh, np_, hd)
        k = t["k"].reshape(b * nh, np_, hd)
        dq = _bmm(dscores, k)
        dk = _bmm_tn(dscores, q)

        dq = model.rope.apply(dq.reshape(b, nh, np_, hd), pos_all, inverse=True)
        dk = model.rope.apply(dk.reshape(b, nh, np_, hd), pos_all, inverse=True)
        dv = dv.reshape(b, nh, np_, hd)

        def _unheads(m):
            return np.ascontiguousarray(m.transpose(0, 2, 1, 3)).reshape(b * np_, d)

        dqkv = np.concatenate([_unheads(dq), _unheads(dk), _unheads(dv)], axis=1)
        grads[f"blocks.{l}.qkv.w"] = _mm_tn(t["h1"], dqkv)
        grads[f"blocks.{l}.qkv.b"] = np.sum(dqkv, axis=0)
        dh1 = _mm_nt(dqkv, prm[f"blocks.{l}.qkv.w"]).reshape(b, np_, d)

        n1_3 = t["n1"].reshape(b, np_, d)
        dn1 = (dh1 * (sc1 + one)).reshape(b * np_, d)
        dsc1 = np.sum(dh1 * n1_3, axis=1)
        dsh1 = np.sum(dh1, axis=1)
        dx = dx_mid + _rmsnorm_back(dn1, t["x_in"], t["inv1"])

        dmod = np.concatenate([dsh1, dsc1, dg1, dsh2, dsc2, dg2], axis=1)
        grads[f"blocks.{l}.mod.w"] = _mm_tn(tape["cond_act"], dmod)
        grads[f"blocks.{l}.mod.b"] = np.sum(dmod, axis=0)
        dcond_act = dcond_act + _mm_nt(dmod, prm[f"blocks.{l}.mod.w"])

    grads["patch_embed.w"] = _mm_tn(tape["x_raw"], dx)
    grads["patch_embed.b"] = np.sum(dx, axis=0)

    dcond = dcond_act * silu_grad(tape["cond"])
    if cfg.num_classes:
        table = np.zeros_like(prm["class_embed.table"])
        np.add.at(table, tape["ids"], dcond)
        grads["class_embed.table"] = table
    dtemb = dcond
    grads["time_mlp.w2"] = _mm_tn(tape["ta"], dtemb)
    grads["time_mlp.b2"] = np.sum(dtemb, axis=0)
    dta = _mm_nt(dtemb, prm["time_mlp.w2"])
    dth = dta * silu_grad(tape["th"])
    grads["time_mlp.w1"] = _mm_tn(tape["tf"], dth)
    grads["time_mlp.b1"] = np.sum(dth, axis=0)

    return grads
