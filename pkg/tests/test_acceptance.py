"""Acceptance checks for the adaptation engine, one test per criterion.

Each test prints a single summary line with the measured quantities and
asserts the stated tolerances, so the verbose run doubles as a report.
"""

import time

import numpy as np

import depthadapt.tape as tp
from conftest import make_scene, make_store
from depthadapt import (AdaptationController, BAOptions, ControllerConfig, CullConfig,
                        DepthNet, Intrinsics, Keyframe, LossWeights,
                        PoseSE3, RegularizerConfig, ReplayBuffer, SyntheticScene,
                        Trajectory, TrainerState, TumConfig,
                        assign_hosts, ate_rmse, build_ba, cull_map, evaluate_depth,
                        fine_tune_step, load_sequence, map_depth_error, parse_config,
                        pretrain, run_adaptation, scale_invariant_error, scene_preset,
                        se3_exp, solve_ba, train_loss)
from depthadapt.continual import (AdamState, ImportanceMatrix, ewc_penalty,
                                  penalty_coefficients)
from depthadapt.pipeline import synthetic_spec
from depthadapt.refine import _assemble, reset_reference, solve_damped
from depthadapt.tape import ParamVector, Tape, grad_check


def report(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}", flush=True)
    assert ok, f"{name}: {detail}"


def scalar(x):
    return float(x.data) if isinstance(x, tp.Tensor) else float(x)


# ---- 1. autodiff soundness ----


def _random_program(seed):
    """One small random network over the op set, as (fn, params)."""
    rng = np.random.default_rng(seed)
    h = w = 8
    c = int(rng.integers(2, 5))
    img = rng.normal(0.5, 0.3, size=(1, 1, h, w))
    kind = seed % 7

    def conv_shapes(cin, cout, tag):
        return [(f"w{tag}", (cout, cin, 3, 3)), (f"b{tag}", (cout,))]

    if kind == 0:
        shapes = conv_shapes(1, c, 1) + conv_shapes(c, 1, 2)

        def fn(tape, lv):
            x = tape.leaf(img)
            e = tp.elu(tp.conv2d(x, lv["w1"], lv["b1"], stride=2, pad=1))
            y = tp.sigmoid(tp.conv2d(e, lv["w2"], lv["b2"], stride=1, pad=1))
            return tp.mean(y)
    elif kind == 1:
        shapes = conv_shapes(1, c, 1) + conv_shapes(c + 1, 1, 2)

        def fn(tape, lv):
            x = tape.leaf(img)
            e = tp.elu(tp.conv2d(x, lv["w1"], lv["b1"], stride=2, pad=1))
            cat = tp.concat([tp.upsample2x(e), x], axis=1)
            y = tp.conv2d(cat, lv["w2"], lv["b2"], stride=1, pad=1)
            return tp.mean(tp.abs_(y))
    elif kind == 2:
        shapes = conv_shapes(1, c, 1)

        def fn(tape, lv):
            x = tape.leaf(img)
            z = tp.conv2d(x, lv["w1"], lv["b1"], stride=1, pad=1)
            return tp.mean(tp.exp_(tp.mul(tp.square(z), -0.1)))
    elif kind == 3:
        shapes = conv_shapes(1, c, 1) + conv_shapes(1, c, 2)

        def fn(tape, lv):
            x = tape.leaf(img)
            a = tp.sigmoid(tp.conv2d(x, lv["w1"], lv["b1"], stride=1, pad=1))
            b = tp.sigmoid(tp.conv2d(x, lv["w2"], lv["b2"], stride=1, pad=1))
            return tp.mean(tp.reciprocal(tp.add(tp.minimum(a, b), 0.5)))
    elif kind == 4:
        # No bias: differencing cancels constant shifts, which would leave an
        # exact-zero gradient for FD to fuzz against the eps floor.
        shapes = [("w1", (1, 1, 3, 3))]

        def fn(tape, lv):
            x = tape.leaf(img)
            d = tp.reshape(tp.conv2d(x, lv["w1"], stride=1, pad=1), (h, w))
            return tp.add(tp.mean(tp.abs_(tp.diff_x(d))), tp.mean(tp.abs_(tp.diff_y(d))))
    elif kind == 5:
        n = 6
        shapes = [("img", (h, w)), ("u0", (n,)), ("v0", (n,))]

        def fn(tape, lv):
            u = tp.add(tp.mul(tp.sigmoid(lv["u0"]), w - 2.0), 0.5)
            v = tp.add(tp.mul(tp.sigmoid(lv["v0"]), h - 2.0), 0.5)
            samples, _ = tp.bilinear_sample(lv["img"], tp.stack_uv(u, v))
            return tp.mean(tp.square(samples))
    else:
        shapes = conv_shapes(1, c, 1) + [("bias", (c, 1, 1))]

        def fn(tape, lv):
            x = tape.leaf(img)
            z = tp.conv2d(x, lv["w1"], lv["b1"], stride=2, pad=1)
            y = tp.sub(z, lv["bias"])
            return tp.mul(tp.sum_(tp.square(y)), 1.0 / 64.0)

    params = ParamVector.build(shapes, lambda name, s: rng.normal(0.0, 0.5, size=s))
    return fn, params


def test_criterion_01_autodiff_soundness():
    t0 = time.monotonic()
    tol = 5e-3
    worst = 0.0
    for seed in range(50):
        fn, params = _random_program(seed)
        idx = np.random.default_rng(1000 + seed).permutation(params.size)[:40]
        worst = max(worst, grad_check(fn, params, indices=idx))
    assert worst < tol, f"random-network gradient mismatch {worst:.2e}"

    # Full training loss: the per-pixel minimum and bilinear resampling lace
    # the surface with derivative kinks, so single indices can land where FD
    # itself is ill-posed. Compare the probed gradient normwise instead, at a
    # step wide enough to average the kink microstructure.
    spec = scene_preset("env_a", width=16, height=16, grid_size=5,
                        texture_freq=(3.0, 9.0))
    scene = SyntheticScene(spec, 3)
    frames = [scene.keyframe(i) for i in range(3)]
    kf, nbrs = frames[1], [frames[0], frames[2]]
    worst_loss = 0.0
    for seed in range(3):
        net = DepthNet.init(seed=seed)

        def fn(tape, lv):
            depth = net.predict_recorded(tape, lv, kf.image)
            total, _ = train_loss([(kf, nbrs, depth)], scene.intrinsics, LossWeights())
            return total

        tape = Tape(dtype=np.float64)
        lm = tape.leaves(net.params)
        tape.backward(fn(tape, lm))
        analytic = np.concatenate(
            [tape.grad(lm[seg.name]).ravel() for seg in net.params.layout])
        base = net.params.values.astype(np.float64).copy()

        def value_at(vec):
            t = Tape(dtype=np.float64)
            leaves = {s.name: t.leaf(vec[s.offset:s.offset + s.size].reshape(s.shape))
                      for s in net.params.layout}
            return float(fn(t, leaves).data)

        idx = np.random.default_rng(2000 + seed).permutation(net.params.size)[:40]
        fd = np.empty(len(idx))
        for k, i in enumerate(idx):
            step = 1e-4 * max(1.0, abs(base[i]))
            up, down = base.copy(), base.copy()
            up[i] += step
            down[i] -= step
            fd[k] = (value_at(up) - value_at(down)) / (2.0 * step)
        a = analytic[idx]
        worst_loss = max(worst_loss, float(
            np.linalg.norm(a - fd) / max(np.linalg.norm(a), np.linalg.norm(fd))))
    elapsed = time.monotonic() - t0
    ok = worst < tol and worst_loss < tol and elapsed < 120
    report("criterion 1 autodiff", ok,
           f"50 nets worst per-index rel err {worst:.2e}, training loss normwise "
           f"{worst_loss:.2e} over 40 indices x 3 nets, {elapsed:.0f}s")


# ---- 2. loss identities ----


def test_criterion_02_loss_identities():
    from depthadapt.losses import photometric_loss, smoothness_loss, sparse_depth_loss

    scene = make_scene(n=3)
    kf = scene.keyframe(1)
    K = scene.intrinsics

    same = Keyframe(id=99, pose=kf.pose.copy(), image=kf.image.copy())
    pe_raw, count = photometric_loss(kf, [same], kf.gt_depth, K)
    pe_self = scalar(pe_raw)
    assert count > 0
    assert abs(pe_self) <= 1e-6, f"pe(I, I) = {pe_self}"

    # Frame 0 carries only freshly spawned anchors at integer pixels; later
    # frames re-observe landmarks at subpixel spots where interpolating the
    # depth map cannot reproduce the point's exact z.
    first = scene.keyframe(0)
    sp_raw, n_sp = sparse_depth_loss(first, first.gt_depth)
    sp = scalar(sp_raw)
    assert n_sp > 0
    assert abs(sp) <= 1e-6, f"L_sparse at exact depth = {sp}"

    sm = scalar(smoothness_loss(kf, np.full_like(kf.gt_depth, 2.5)))
    assert abs(sm) <= 1e-6, f"L_smooth at constant depth = {sm}"

    # Per-pixel minimum never exceeds either single-neighbor loss when the
    # two neighbors share a pose (identical validity masks).
    rng = np.random.default_rng(5)
    k16 = Intrinsics(fx=20.0, fy=20.0, cx=7.5, cy=7.5, width=16, height=16)
    worst_gap = -np.inf
    for _ in range(100):
        kf2 = Keyframe(id=0, pose=PoseSE3.identity(),
                       image=rng.random((16, 16)).astype(np.float32))
        nb_pose = se3_exp(rng.normal(0.0, 0.01, size=6))
        n1 = Keyframe(id=1, pose=nb_pose,
                      image=rng.random((16, 16)).astype(np.float32))
        n2 = Keyframe(id=2, pose=nb_pose.copy(),
                      image=rng.random((16, 16)).astype(np.float32))
        depth = (0.5 + 4.5 * rng.random((16, 16))).astype(np.float32)
        both, cb = photometric_loss(kf2, [n1, n2], depth, k16)
        one, c1 = photometric_loss(kf2, [n1], depth, k16)
        two, c2 = photometric_loss(kf2, [n2], depth, k16)
        assert cb > 0 and cb == c1 == c2
        worst_gap = max(worst_gap, scalar(both) - min(scalar(one), scalar(two)))
    assert worst_gap <= 1e-6, f"min-over-neighbors exceeded single by {worst_gap}"
    report("criterion 2 loss identities", True,
           f"pe(I,I)={pe_self:.2e}, sparse={sp:.2e}, smooth={sm:.2e}, "
           f"min-gap={worst_gap:.2e}")


# ---- 3. importance regularizer mechanics ----


def test_criterion_03_ewc_mechanics():
    rng = np.random.default_rng(11)
    params = ParamVector.build([("w", (4, 3)), ("b", (4,))],
                               lambda n, s: rng.normal(size=s))
    theta_star = params.values.astype(np.float64).copy()
    coeff = np.abs(rng.normal(size=params.size)) * 1e4
    tape = Tape(dtype=np.float64)
    pen = ewc_penalty(tape, tape.leaves(params), params, theta_star, coeff)
    assert float(pen.data) == 0.0, "penalty must vanish at the anchor"

    # Single-parameter arithmetic case: (beta / 2) * F_hat * (theta - theta*)^2
    # with beta = 5e7, F_hat floored at 0.001 and a unit displacement.
    one = ParamVector.build([("w", (1,))], lambda n, s: np.ones(s))
    state = TrainerState(adam=AdamState.init(1),
                         reg=RegularizerConfig(kind="ewc", beta=5.0e7, max_f=0.001),
                         theta_star=np.zeros(1),
                         ewc=ImportanceMatrix(1, max_f=0.001))
    state.ewc.consolidate(np.zeros(1))  # zero grads: importance floors at max_f
    coeff1 = penalty_coefficients(state, one.values.astype(np.float64))
    tape1 = Tape(dtype=np.float64)
    pen1 = ewc_penalty(tape1, tape1.leaves(one), one, state.theta_star, coeff1)
    assert float(pen1.data) == 25000.0, f"expected 25000, got {float(pen1.data)}"

    fisher = ImportanceMatrix(20)
    acc = fisher.f_accum.copy()
    monotone = True
    for _ in range(100):
        fisher.consolidate(rng.normal(size=20))
        monotone = monotone and bool(np.all(fisher.f_accum >= acc))
        acc = fisher.f_accum.copy()
    assert monotone, "squared-gradient accumulator decreased"

    # beta = 0 must step bit-identically to no regularizer at all.
    spec = scene_preset("env_a", width=16, height=16, grid_size=5,
                        texture_freq=(3.0, 9.0))
    scene = SyntheticScene(spec, 2)
    batch = [(scene.keyframe(1), [scene.keyframe(0)])]
    net_a, net_b = DepthNet.init(seed=4), DepthNet.init(seed=4)
    st_a = TrainerState.init(net_a, RegularizerConfig(kind="ewc", beta=0.0))
    st_b = TrainerState.init(net_b, RegularizerConfig(kind="none"))
    for _ in range(3):
        fine_tune_step(net_a, batch, scene.intrinsics, LossWeights(), st_a)
        fine_tune_step(net_b, batch, scene.intrinsics, LossWeights(), st_b)
    identical = net_a.params.values.tobytes() == net_b.params.values.tobytes()
    assert identical, "beta=0 diverged from the unregularized trajectory"
    report("criterion 3 regularizer mechanics", True,
           "anchor penalty 0, unit case 25000 exact, accumulator monotone over "
           "100 batches, beta=0 bit-identical over 3 steps")


# ---- 4. forgetting ablation ----

_ABLATION_CFG = """
run.pretrain_steps = 300
source.grid_size = 8
source.texture_freq_lo = 3.0
source.texture_freq_hi = 9.0
"""


def _adjacent(frames, i, upto=None):
    """Sequence neighbors of frame i, truncated to the first ``upto`` frames."""
    hi = len(frames) if upto is None else min(upto, len(frames))
    out = []
    if i > 0:
        out.append(frames[i - 1])
    if i + 1 < hi:
        out.append(frames[i + 1])
    return out


def _ablation_scene(name, n, depth_noise=0.0, seed=0):
    spec = synthetic_spec(parse_config(_ABLATION_CFG), name)
    spec.depth_noise = depth_noise
    spec.seed = seed
    return SyntheticScene(spec, n)


def _combined_pc(net, frames):
    preds = [net.predict(kf.image) for kf in frames]
    return evaluate_depth(preds, [kf.gt_depth for kf in frames]).mean_percent_correct


def _adapt_arm(net0, frames_a, frames_b, K, reg_kind, use_replay, seed):
    net = net0.clone()
    state = TrainerState.init(net, RegularizerConfig(kind=reg_kind), lr=1e-3)
    weights = LossWeights(lambda1=1.0)
    replay = ReplayBuffer(seed=seed + 17)
    for i in range(len(frames_a)):
        replay.add(i)
    for t in range(len(frames_b)):
        batch = [(frames_b[t], _adjacent(frames_b, t, upto=t))]
        if use_replay:
            rid = replay.sample(exclude=1000 + t)
            if rid is not None:
                if rid < 1000:
                    batch.append((frames_a[rid], _adjacent(frames_a, rid)))
                else:
                    j = rid - 1000
                    batch.append((frames_b[j], _adjacent(frames_b, j, upto=t)))
        fine_tune_step(net, batch, K, weights, state)
        replay.add(1000 + t)
    return net


def test_criterion_04_forgetting_ablation():
    t0 = time.monotonic()
    net0 = DepthNet.init(seed=0)
    pretrain(net0, parse_config(_ABLATION_CFG))

    scene_a = _ablation_scene("env_a", 30)
    frames_a = [scene_a.keyframe(i) for i in range(30)]
    scene_b_clean = _ablation_scene("env_b", 100)
    eval_all = frames_a[::3] + [scene_b_clean.keyframe(i) for i in range(0, 100, 10)]

    arms = {"recent": ("none", False), "replay": ("none", True),
            "replay+reg": ("ewc", True)}
    combined = {name: [] for name in arms}
    for seed in range(5):
        scene_b = _ablation_scene("env_b", 100, depth_noise=0.1, seed=seed)
        frames_b = [scene_b.keyframe(i) for i in range(100)]
        for name, (kind, rep) in arms.items():
            net = _adapt_arm(net0, frames_a, frames_b, scene_b.intrinsics,
                             kind, rep, seed)
            combined[name].append(_combined_pc(net, eval_all))

    means = {name: float(np.mean(vals)) for name, vals in combined.items()}
    margin_reg = means["replay+reg"] - means["replay"]
    margin_rep = means["replay"] - means["recent"]
    elapsed = time.monotonic() - t0
    ok = margin_reg >= 2.0 and margin_rep >= 2.0 and elapsed < 900
    report("criterion 4 forgetting ablation", ok,
           f"combined pc replay+reg={means['replay+reg']:.1f} "
           f"replay={means['replay']:.1f} recent={means['recent']:.1f} "
           f"(margins {margin_reg:.1f}/{margin_rep:.1f}pp, 5 seeds, {elapsed:.0f}s)")


# ---- 5. controller conformance ----


def _reference_trace(m, n, outcomes):
    """Twenty-line restatement of the scheduling rule."""
    actions, n_conv = [], 0
    for t in range(len(outcomes)):
        step = []
        if t > 0 and t % m == 0:
            n_conv = n_conv + 1 if outcomes[t] else 0
            step.append("validate")
            if n_conv > 0 and n_conv % n == 0:
                step.append("trigger_ba")
        else:
            step.append("fine_tune")
        actions.append(tuple(step))
    return actions


def test_criterion_05_controller_conformance():
    checked = 0
    for m in range(1, 6):
        for n in range(1, 4):
            traces = [[True] * 50]
            rng = np.random.default_rng(100 * m + n)
            traces += [list(rng.random(50) < 0.7) for _ in range(3)]
            for trace in traces:
                cur = [0]
                ctrl = AdaptationController(
                    ControllerConfig(m=m, n=n, tau_val=0.2),
                    validate=lambda: 0.1 if trace[cur[0]] else 0.3,
                    fine_tune=lambda: None,
                    trigger_ba=lambda: None)
                ref = _reference_trace(m, n, trace)
                for t in range(50):
                    cur[0] = t
                    got = tuple(ctrl.step())
                    assert got == ref[t], f"m={m} n={n} t={t}: {got} != {ref[t]}"
                if all(trace):
                    first_ba = next(i for i, a in enumerate(ref) if "trigger_ba" in a)
                    assert first_ba == m * n, f"first BA at {first_ba}, want {m * n}"
                checked += 1
    report("criterion 5 controller conformance", True,
           f"{checked} 50-step traces exact across m in 1..5, n in 1..3 "
           "(first BA at t = m*n on all-pass)")


# ---- 6. culling efficacy ----


def test_criterion_06_culling():
    scene, store = make_store(8, grid_size=8)
    K = scene.intrinsics
    for kf in store.keyframes.values():
        kf.last_val_loss = 0.0
    assign_hosts(store)

    live = [mp for mp in store.live_points() if mp.host_keyframe is not None]
    rng = np.random.default_rng(3)
    outlier_ids = set(rng.choice([mp.id for mp in live],
                                 size=len(live) // 5, replace=False).tolist())
    for mp in live:
        if mp.id in outlier_ids:
            kf = store.keyframes[mp.host_keyframe]
            x = kf.pose.inverse().apply(mp.position)
            mp.position = kf.pose.apply(x * 3.0)  # same pixel, triple the depth

    depth_maps = {kid: kf.gt_depth for kid, kf in store.keyframes.items()}
    esi_before = map_depth_error(store, K)
    cull_map(store, depth_maps, K, CullConfig(gamma=0.5, d_max=20.0))
    esi_after = map_depth_error(store, K)

    culled = {mp.id for mp in store.map_points.values() if mp.culled}
    inlier_ids = {mp.id for mp in live} - outlier_ids
    recall = len(culled & outlier_ids) / len(outlier_ids)
    false_cull = len(culled & inlier_ids) / len(inlier_ids)
    ok = recall >= 0.9 and false_cull <= 0.1 and esi_after < esi_before
    report("criterion 6 culling", ok,
           f"recall={recall:.3f} false-cull={false_cull:.3f} "
           f"map e_si {esi_before:.3f} -> {esi_after:.3f}")


# ---- 7. bundle adjustment ----


def _hosted_store(n, **overrides):
    scene, store = make_store(n, **overrides)
    for kf in store.keyframes.values():
        kf.last_val_loss = 0.0
    assign_hosts(store)
    return scene, store


def test_criterion_07_bundle_adjustment():
    t0 = time.monotonic()
    # (a) an exactly consistent state is a fixed point
    scene, store = _hosted_store(6)
    opts = BAOptions(max_iters=50, init_lambda=1.0, lambda_down=0.5,
                     huber_delta=0.1, build_margin=3.0)
    problem = build_ba(store, scene.intrinsics, opts)
    reset_reference(problem)
    res = solve_ba(problem, opts)
    accepted = [r for r in res.iterations if r.accepted]
    drift = abs(res.final_cost - res.initial_cost)
    assert not accepted and drift < 1e-10, (
        f"fixed point moved: {len(accepted)} accepted, drift {drift:.2e}")

    # (b) pose and depth perturbation recovery, five seeds. References are
    # made exactly consistent first so the unperturbed state is the true
    # photometric optimum rather than optimum-up-to-render-interpolation.
    recovered = 0
    monotone = True
    for seed in range(5):
        scene, store = _hosted_store(10, grid_size=10)
        gt = Trajectory.from_pairs(scene.gt_trajectory())
        problem = build_ba(store, scene.intrinsics, BAOptions(build_margin=3.0))
        reset_reference(problem)
        rng = np.random.default_rng(100 + seed)
        for slot in range(1, len(problem.poses_cw)):
            xi = rng.normal(size=6)
            xi *= 0.02 / np.linalg.norm(xi)
            problem.poses_cw[slot] = se3_exp(xi).compose(problem.poses_cw[slot])
        for lm in problem.landmarks:
            lm.inv_depth *= 1.0 + rng.uniform(-0.05, 0.05)
        est0 = Trajectory.from_pairs(
            [(float(problem.kf_ids[i]), problem.poses_cw[i].inverse())
             for i in range(len(problem.kf_ids))])
        ate0 = ate_rmse(est0, gt, align="sim3")
        result = solve_ba(problem, BAOptions(max_iters=100, init_lambda=1.0,
                                             lambda_down=0.5, huber_delta=0.1))
        costs = [r.cost for r in result.iterations if r.accepted]
        monotone = monotone and all(b <= a for a, b in zip(costs, costs[1:]))
        est1 = Trajectory.from_pairs(
            [(float(k), result.poses_wc[k]) for k in sorted(result.poses_wc)])
        if ate_rmse(est1, gt, align="sim3") < 0.2 * ate0:
            recovered += 1
    assert monotone, "cost increased across accepted steps"
    assert recovered >= 4, f"recovered {recovered}/5 seeds"

    # (c) Schur elimination equals the dense solve on a 3-keyframe,
    # 20-landmark instance
    scene, store = _hosted_store(3, grid_size=8)
    keep = [mp.id for mp in store.live_points()][:29]
    for mp in store.live_points():
        if mp.id not in keep:
            mp.culled = True
    problem = build_ba(store, scene.intrinsics, BAOptions())
    assert len(problem.landmarks) == 20
    rho = np.array([lm.inv_depth for lm in problem.landmarks])
    hpp, hpl, hll, bp, bl, _ = _assemble(problem, problem.poses_cw, rho, BAOptions())
    dp_s, dl_s = solve_damped(hpp, hpl, hll, bp, bl, lam=1e-3, schur=True)
    dp_d, dl_d = solve_damped(hpp, hpl, hll, bp, bl, lam=1e-3, schur=False)
    gap = max(float(np.abs(dp_s - dp_d).max()), float(np.abs(dl_s - dl_d).max()))
    elapsed = time.monotonic() - t0
    ok = gap < 1e-8 and elapsed < 300
    report("criterion 7 bundle adjustment", ok,
           f"fixed-point drift {drift:.1e}, recovery {recovered}/5, "
           f"schur-dense gap {gap:.1e} over {len(problem.landmarks)} landmarks, "
           f"{elapsed:.0f}s")


# ---- 8. metric invariances ----


def test_criterion_08_metric_invariances():
    rng = np.random.default_rng(21)
    z = np.exp(rng.normal(0.5, 0.4, size=500))
    z_gt = np.exp(rng.normal(0.5, 0.4, size=500))
    base = scale_invariant_error(z, z_gt)
    worst = max(abs(scale_invariant_error(s * z, z_gt) - base)
                for s in (1e-3, 0.37, 42.0, 1e4))
    assert worst < 1e-9, f"e_si scale drift {worst:.2e}"

    exact = scale_invariant_error(np.array([1.0, np.e]), np.array([1.0, 1.0]))
    assert exact == 0.5, f"two-pixel case gave {exact!r}"

    est_pairs, gt_pairs = [], []
    for i in range(40):
        q = rng.normal(size=4)
        pose = PoseSE3(q / np.linalg.norm(q), rng.normal(size=3))
        gt_pairs.append((0.1 * i, pose))
        est_pairs.append((0.1 * i, PoseSE3(pose.q, pose.t + rng.normal(0.0, 0.05, size=3))))
    gt = Trajectory.from_pairs(gt_pairs)
    base_ate = ate_rmse(Trajectory.from_pairs(est_pairs), gt, align="sim3")
    worst_ate = 0.0
    for _ in range(5):
        q = rng.normal(size=4)
        rot = PoseSE3(q / np.linalg.norm(q), np.zeros(3))
        s = float(rng.uniform(0.5, 2.0))
        shift = rng.normal(0.0, 3.0, size=3)
        moved = Trajectory.from_pairs(
            [(t, PoseSE3(p.q, s * rot.apply(p.t) + shift)) for t, p in est_pairs])
        worst_ate = max(worst_ate, abs(ate_rmse(moved, gt, align="sim3") - base_ate))
    assert worst_ate < 1e-6, f"sim3 ATE drift {worst_ate:.2e}"
    report("criterion 8 metric invariances", True,
           f"e_si scale drift {worst:.1e}, two-pixel case exactly 0.5, "
           f"sim3 ATE drift {worst_ate:.1e}")


# ---- 9. end-to-end loop ----

_E2E_CFG = """
run.pretrain_steps = 300
source.kind = synthetic
source.scene = env_a
source.frames = 60
source.grid_size = 8
source.depth_noise = 0.3
source.pose_noise = 0.01
source.texture_freq_lo = 3.0
source.texture_freq_hi = 9.0
controller.m = 5
controller.n = 3
cull.d_max = 20.0
ba.max_iters = 30
ba.init_lambda = 1.0
ba.lambda_down = 0.5
ba.huber_delta = 0.1
ba.build_margin = 3.0
"""


def test_criterion_09_end_to_end(tmp_path):
    t0 = time.monotonic()
    results = []
    for tag in ("first", "second"):
        cfg = parse_config(_E2E_CFG + f"run.out_dir = {tmp_path / tag}\n")
        results.append(run_adaptation(cfg))
    res = results[0]
    passes = [p for p in res.ba_passes if p.status == "ok"]
    assert res.keyframes == 60
    assert len(passes) >= 1, "no bundle adjustment pass ran"
    esi_pre = passes[0].esi_before
    esi_post = passes[-1].esi_after
    assert esi_post <= esi_pre, f"map e_si worsened: {esi_pre:.4f} -> {esi_post:.4f}"
    identical = all(
        (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()
        for name in ("metrics_depth.tsv", "metrics_summary.tsv", "train_log.tsv"))
    elapsed = time.monotonic() - t0
    ok = identical and elapsed < 600
    report("criterion 9 end-to-end", ok,
           f"60 keyframes, {len(passes)} BA passes, map e_si {esi_pre:.3f} -> "
           f"{esi_post:.3f}, reruns identical={identical}, {elapsed:.0f}s")


# ---- 10. dataset ingestion ----


def test_criterion_10_dataset_ingestion(tum_dir):
    K = Intrinsics(fx=52.5, fy=52.5, cx=31.5, cy=23.5, width=64, height=48)
    frames, points, gt = load_sequence(TumConfig(directory=str(tum_dir), intrinsics=K,
                                                 keyframe_stride=1, grid_size=16))
    stamps = [kf.timestamp for kf in frames]
    # 10.0 pairs with depth at +0.019 s; 10.1's nearest depth sits +0.030 s
    # away and must drop under the 0.02 s tolerance.
    assert stamps == [10.0, 10.2, 10.3, 10.4], f"associated stamps {stamps}"
    depths = {p.depth for kf in frames for p in kf.sparse}
    assert depths == {1.0}, f"raw 5000 must decode to exactly 1.0 m, got {depths}"
    assert len(gt) == 5
    for i, kf in enumerate(frames):
        assert abs(kf.pose.t[0] - 0.1 * [0, 2, 3, 4][i]) < 1e-12
    assert points and all(mp.observations for mp in points.values())
    report("criterion 10 dataset ingestion", True,
           f"4/5 frames associated ({len(points)} landmarks), 0.019 s kept, "
           "0.030 s dropped, depth 5000 -> 1.0 m exact")
