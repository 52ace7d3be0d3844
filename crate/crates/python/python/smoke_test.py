"""Exercises the bindings end to end. Run after `maturin develop` or installing the wheel."""

import math
import os
import tempfile

import icrcaps_py as ic


def check_group():
    g = ic.P4Element(1, (2, -1))
    assert g.compose(g.inverse()) == ic.P4Element()
    assert ic.P4Element(1).apply((1, 0)) == (0, 1)

    # Quarter turn of [[0, 1], [2, 3]].
    f = ic.Tensor([1, 2, 2], [0.0, 1.0, 2.0, 3.0])
    assert ic.act_planar(ic.P4Element(1), f).tolist() == [1.0, 3.0, 0.0, 2.0]

    m = ic.Tensor([1, 4, 3, 3], [float(i) for i in range(36)])
    back = ic.act(g.inverse(), ic.act(g, m, circular=True), circular=True)
    assert back == m


def check_correlation():
    x = ic.Tensor([1, 6, 6], [math.sin(i) for i in range(36)])
    w_lift = ic.Tensor([2, 1, 3, 3], [math.cos(i) for i in range(18)])
    w_group = ic.Tensor([1, 2, 4, 3, 3], [math.sin(0.3 * i) for i in range(72)])
    run = lambda img: ic.group_correlate(
        ic.lift_correlate(img, w_lift, padding=1, circular=True), w_group, padding=1, circular=True
    )
    g = ic.P4Element(3, (1, 2))
    moved = run(ic.act_planar(g, x, circular=True))
    expect = ic.act(g, run(x), circular=True)
    assert moved.shape == [1, 4, 6, 6]
    assert moved.max_abs_diff(expect) < 1e-12
    assert ic.rotate_filter(ic.rotate_filter(w_group, 2), 2) == w_group


def check_routing():
    # Three parts and one whole on a 1x1 grid; every rotation slot holds the
    # same vectors, so all four routing problems agree.
    vecs = [(1.0, 0.0), (math.sqrt(0.5), math.sqrt(0.5)), (0.0, 1.0)]
    pred = ic.Tensor([3, 1, 2, 4, 1, 1], [x for v in vecs for x in v for _ in range(4)])
    state = ic.icr_weights(pred, k=1, num_iter=1)
    assert state["c"].shape == [1, 3, 4, 1, 1]
    c = [state["c"].get([0, i, 0, 0, 0]) for i in range(3)]
    assert all(abs(a - b) < 1e-3 for a, b in zip(c, [0.4011, 0.1978, 0.4011])), c
    assert abs(sum(c) - 1.0) < 1e-12
    assert state["kn"][::4] == [1, 0, 1]
    out = ic.route(pred, k=1, num_iter=1)
    assert out.shape == [1, 2, 4, 1, 1]
    assert math.hypot(out.get([0, 0, 0, 0, 0]), out.get([0, 1, 0, 0, 0])) < 1.0
    v = ic.squash([3.0, 4.0])
    assert abs(math.hypot(*v) - 25.0 / 26.0) < 1e-12


def check_model():
    images, labels = ic.gen_synthetic(classes=4, per_class=2, size=8, seed=3)
    assert images.shape == [8, 1, 8, 8] and sorted(set(labels)) == [0, 1, 2, 3]

    model = ic.Model.build("desk", classes=4, seed=0)
    logits = model.forward(images)
    assert logits.shape == [8, 4]
    first = model.loss(images, labels)
    for _ in range(5):
        model.train_step(images, labels, 3e-3)
    assert model.loss(images, labels) < first
    ev = model.evaluate(images, labels, batch=4)
    assert ev["samples"] == 8 and 0.0 <= ev["accuracy"] <= 1.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        model.save(path, epoch=5)
        again = ic.Model.load(path)
        assert again.forward(images) == model.forward(images)
        try:
            ic.Model.load(os.path.join(d, "missing.ckpt"))
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint loaded")

    exact = model.audit_mode()
    x = ic.Tensor([1, 1, 8, 8], images.tolist()[:64])
    turned = ic.Tensor([1, 1, 8, 8], ic.act_planar(ic.P4Element(1), ic.Tensor([1, 8, 8], x.tolist())).tolist())
    assert exact.forward(x).max_abs_diff(exact.forward(turned)) < 1e-9


if __name__ == "__main__":
    check_group()
    check_correlation()
    check_routing()
    check_model()
    print("smoke test passed")
