import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from securebayes import update_plan as plan
from securebayes.data import make_density
from securebayes.he import load_preset, make_backend
from securebayes.models import Dataset, make_model
from securebayes.protocol import (
    CSP,
    SERVER,
    ChannelError,
    ConfigError,
    Fabric,
    LinearDelay,
    MaskPair,
    ProtocolAbort,
    ProtocolConfig,
    draw_mask,
    export_parity,
    fisher_yates,
    mask_moduli,
    quantize_norm,
    run_protocol,
    secure_max,
    site,
)
from securebayes.protocol import messages as M
from securebayes.protocol.parties import Csp
from securebayes.psgld import ParitySampler, site_gradient
from securebayes.rng import stream

SHALLOW = str(Path(__file__).parent / "data" / "shallow.json")


def small_logistic(n=400, d=5, seed=0):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, d)) * r.uniform(0.5, 3, d) + r.uniform(-2, 2, d)
    y = (r.uniform(size=n) < 1 / (1 + np.exp(-X @ r.normal(size=d) / 3))).astype(int)
    return Dataset(X, y=y)


def parity(result, cfg, iters):
    return ParitySampler(make_model(cfg.model), result.site_data, result.spec, result.site_coeffs,
                         result.slots, cfg.aux_c, cfg.seed, batch_sizes=result.batch_sizes).run(iters)


# messaging ----------------------------------------------------------------------
def test_party_ids():
    assert str(site(3)) == "site3" and str(SERVER) == "server" and str(CSP) == "csp"
    with pytest.raises(ValueError):
        site(0)
    with pytest.raises(ValueError):
        M.PartyId("client")


def test_fabric_fifo_sequence_and_kind_checks(tmp_path):
    fab = Fabric(LinearDelay(latency=0.5, bandwidth=100.0))
    for i in range(3):
        fab.send(site(1), SERVER, "x", M.GLOBAL_STATS, {"i": i})
    fab.send(site(2), SERVER, "x", M.GLOBAL_STATS, {"i": 9})
    assert [fab.recv(SERVER, site(1)).clear()["i"] for _ in range(3)] == [0, 1, 2]
    assert fab.pending() == 1
    with pytest.raises(ChannelError):
        fab.recv(SERVER, site(1))
    with pytest.raises(ChannelError):
        fab.recv(SERVER, site(2), M.THETA_BROADCAST)
    seqs = [r["seq"] for r in fab.records()]
    assert seqs == sorted(seqs) and len(set(seqs)) == 4
    assert fab.sim_time["site1"] == pytest.approx(3 * 0.5 + sum(m.nbytes for m in fab.transcript[:3]) / 100)
    fab.to_jsonl(tmp_path / "t.jsonl")
    rec = json.loads((tmp_path / "t.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"seq", "from", "to", "phase", "payload_kind", "bytes"}


def test_clear_payload_roundtrip_and_type_guard():
    body = M.decode_clear(M.encode_clear({"theta": np.array([1.5, -2.0]), "t": np.int64(3)}))
    assert np.array_equal(body["theta"], [1.5, -2.0]) and body["t"] == 3
    msg = M.Message(1, SERVER, CSP, "x", M.GLOBAL_STATS, M.encode_clear({}))
    with pytest.raises(TypeError):
        msg.ciphertext()


# masking ------------------------------------------------------------------------
def test_mask_moduli_are_primes_of_the_stated_size():
    t1, t2 = mask_moduli()
    assert t1.bit_length() == 50 and t2.bit_length() == 25
    import sympy
    assert sympy.isprime(t1) and sympy.isprime(t2)


def test_toy_mask_example():
    mp = MaskPair(r1=5, r2=2, t1=101, t2=7, delta=1.0)
    masked = [mp.mask_int(v) for v in (3, 7)]
    assert masked == [16, 24]
    assert mp.unmask_int(max(masked)) == 7
    with pytest.raises(ValueError):
        MaskPair(r1=5, r2=0, t1=101, t2=7)


@given(st.lists(st.integers(0, 2**30), min_size=1, max_size=16), st.integers(0, 2**32))
def test_integer_masking_preserves_the_maximum(vals, seed):
    mp = draw_mask(np.random.default_rng(seed))
    masked = [mp.mask_int(v) for v in vals]
    assert mp.unmask_int(max(masked)) == max(vals)


@given(st.integers(1, 30), st.integers(0, 1000))
def test_fisher_yates_is_a_permutation(n, seed):
    assert sorted(fisher_yates(n, np.random.default_rng(seed))) == list(range(n))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 500), min_size=1, max_size=6), st.integers(0, 10_000))
def test_secure_max_is_exact_on_the_norm_grid(vals, seed):
    assert secure_max(vals, seed=seed) == max(quantize_norm(v) for v in vals)


def test_quantized_norm_never_undershoots():
    for v in (1e-3, 0.3, 7.123456789):
        assert v <= quantize_norm(v) < v + 2.0**-20


# precomputation -------------------------------------------------------------------
def precompute_only(data, K, seed=0):
    cfg = ProtocolConfig(model="logistic", sites=K, tau=K, T=1, iters=0, seed=seed, backend="mock")
    return run_protocol(cfg, data)


def test_two_site_standardization_example():
    data = Dataset(np.array([[1.0], [3.0], [5.0], [7.0]]), y=np.array([0, 1, 0, 1]))
    data = data.with_partition([np.array([0, 1]), np.array([2, 3])])
    res = precompute_only(data, 2)
    st_ = res.standardizer
    assert res.spec.N == 4
    assert st_.mean[0] == pytest.approx(4.0, abs=1e-6) and st_.var[0] == pytest.approx(5.0, abs=1e-6)


def test_standardization_matches_central_oracle():
    data = small_logistic()
    data.X[:, 2] = 3.0  # constant column must be dropped
    res = precompute_only(data, 3)
    st_ = res.standardizer
    keep = np.ptp(data.X, axis=0) > 0
    assert np.array_equal(st_.keep, keep)
    assert np.allclose(st_.mean, data.X[:, keep].mean(axis=0), atol=1e-6)
    assert np.allclose(st_.var, data.X[:, keep].var(axis=0), rtol=1e-6)
    Z = (data.X[:, keep] - data.X[:, keep].mean(axis=0)) / data.X[:, keep].std(axis=0)
    assert st_.max_norm == pytest.approx(np.max(np.linalg.norm(Z, axis=1)), rel=1e-6)
    rows = np.vstack([s.X for s in res.site_data])
    assert np.max(np.linalg.norm(rows, axis=1)) <= 1.0


def test_single_site_global_stats_equal_local():
    data = small_logistic(n=100, d=3)
    res = precompute_only(data, 1)
    assert np.allclose(res.standardizer.mean, data.X.mean(axis=0), atol=1e-6)


def test_count_rounding_abort():
    params = load_preset("tiny")
    fab = Fabric()
    csp = Csp(make_backend("exact", params, 0), fab)
    pk, _ = csp.keygen()
    fab.send(SERVER, CSP, "standardize", M.ENC_COUNT, csp.backend.encrypt_values([10.4], pk))
    with pytest.raises(ProtocolAbort, match="rounding"):
        csp.release_count([site(1)], False, 1)


# iterations ---------------------------------------------------------------------------
def test_exact_backend_protocol_is_bit_identical_to_parity_sampler():
    cfg = ProtocolConfig(model="logistic", sites=2, tau=40, T=10, iters=25, backend="exact", seed=4,
                         he_preset="tiny")
    res = run_protocol(cfg, small_logistic())
    assert np.array_equal(res.trajectory.thetas, parity(res, cfg, 25).thetas)


def test_density_protocol_bit_identical_and_noisy_mock_close():
    cfg = ProtocolConfig(model="density", sites=2, iters=30, backend="exact", seed=1)
    data = make_density(1)
    exact = run_protocol(cfg, data)
    assert np.array_equal(exact.trajectory.thetas, parity(exact, cfg, 30).thetas)
    noisy = run_protocol(ProtocolConfig(model="density", sites=2, iters=30, backend="mock", seed=1), data)
    assert np.max(np.abs(noisy.trajectory.thetas - exact.trajectory.thetas)) < 1e-6


def test_op_counts_and_decryptions_per_iteration():
    cfg = ProtocolConfig(model="logistic", sites=2, tau=40, T=10, iters=12, backend="exact", seed=0)
    res = run_protocol(cfg, small_logistic())
    lay = plan.BlockLayout(res.slots, res.site_data[0].d)
    for t, ops in enumerate(res.iteration_ops, start=1):
        assert ops.get("HM", 0) <= 9
        assert ops.get("SM", 0) <= 8 + -(-min(t, 219) // lay.blocks)
        assert ops.get("rot", 0) == lay.fold_rounds(t)
    assert res.csp_decrypts == [1] * 12
    assert res.phase_ops["csp"]["iterate"]["dec"] == 12


def test_transcript_views_are_semi_honest():
    cfg = ProtocolConfig(model="logistic", sites=2, tau=40, T=10, iters=3, backend="mock", seed=0)
    res = run_protocol(cfg, small_logistic())
    server_view = res.fabric.view(SERVER)
    assert {m.kind for m in server_view if m.sender.role == "site"} <= M.CIPHERTEXT_KINDS
    clear_to_server = [m.clear() for m in server_view if m.kind in M.CLEAR_KINDS]
    assert all(set(b) <= {"N", "t", "theta"} for b in clear_to_server)
    csp_view = res.fabric.view(CSP)
    assert all(m.sender == SERVER for m in csp_view)
    assert {m.kind for m in csp_view} <= M.CIPHERTEXT_KINDS
    norm_msgs = [m for m in csp_view if m.phase == "normalize"]
    assert {m.kind for m in norm_msgs} == {M.ENC_MASKED_NORM, M.ENC_MAX}
    # every site holds the same released parameters
    thetas = [m.clear()["theta"] for m in res.fabric.transcript if m.kind == M.THETA_BROADCAST and m.receiver.role == "site"]
    per_t = {}
    for m in res.fabric.transcript:
        if m.kind == M.THETA_BROADCAST and m.receiver.role == "site":
            per_t.setdefault(m.clear()["t"], []).append(m.clear()["theta"])
    assert all(all(np.array_equal(v[0], x) for x in v) for v in per_t.values())
    assert len(thetas) == 2 * 4


def test_site_messages_carry_placed_local_gradients():
    cfg = ProtocolConfig(model="logistic", sites=3, tau=60, T=10, iters=1, backend="exact", seed=2)
    res = run_protocol(cfg, small_logistic())
    grads = [m for m in res.fabric.transcript if m.kind == M.ENC_GRADIENT]
    assert len(grads) == 3
    be = make_backend("exact", load_preset("full"))
    lay = plan.BlockLayout(res.slots, res.site_data[0].d)
    model = make_model("logistic")
    for k, msg in enumerate(grads):
        v = be.decode(msg.ciphertext())  # exact-mock payloads carry the slot values
        start = lay.block_of(1) * lay.d_pad
        assert np.count_nonzero(v[:start]) == 0 and np.count_nonzero(v[start + lay.d:]) == 0
        idx = stream(cfg.seed, "site", k, "batch").choice(res.site_data[k].n, 20, replace=False)
        expect = site_gradient(model, np.zeros(lay.d), res.site_data[k].take(idx), cfg.aux_c, 1.0)
        assert np.array_equal(lay.read(v, 1), expect)


def test_imbalanced_split_completes():
    cfg = ProtocolConfig(model="density", sites=2, partition=[4, 1], iters=200, backend="mock", seed=0,
                         proportional_batches=True)
    res = run_protocol(cfg, make_density(0))
    assert [d.n for d in res.site_data] == [8000, 2000]
    assert res.batch_sizes == [800, 200]
    assert np.allclose(res.trajectory.tail_mean(20), [0.5, -0.5], atol=0.15)


def test_config_errors_and_aborts():
    with pytest.raises(ConfigError):
        run_protocol(ProtocolConfig(sites=0))
    with pytest.raises(ConfigError):
        run_protocol(ProtocolConfig(gamma=True))
    with pytest.raises(ConfigError):
        run_protocol(ProtocolConfig(sites=3, iters=1))  # tau 1000 not divisible by 3
    with pytest.raises(ConfigError):
        ProtocolConfig.from_dict({"sites": 2, "colour": "red"})
    cfg = ProtocolConfig.from_dict({"sites": 2, "privacy": {"epsilon": 0.5, "tau": 500}, "lambda": 1e-3})
    assert (cfg.epsilon, cfg.tau, cfg.lam) == (0.5, 500, 1e-3)
    # a depth-starved preset makes the server abort, and the cause reaches the transcript
    with pytest.raises(ProtocolAbort) as info:
        run_protocol(ProtocolConfig(model="density", sites=2, iters=2, he_preset=SHALLOW),
                     make_density(0))
    aborts = [m for m in info.value.fabric.transcript if m.kind == M.ABORT]
    assert aborts and "preconditioner" in aborts[0].clear()["cause"]


def test_export_parity(tmp_path):
    cfg = ProtocolConfig(model="logistic", sites=2, tau=40, T=10, iters=2, backend="exact", seed=0)
    res = run_protocol(cfg, small_logistic())
    export_parity(res, tmp_path / "p.npz")
    z = np.load(tmp_path / "p.npz")
    assert np.array_equal(z["site0_X"], res.site_data[0].X) and int(z["slots"]) == res.slots


@pytest.mark.slow
def test_lattice_protocol_tracks_mock():
    cfg = ProtocolConfig(model="logistic", sites=2, tau=40, T=10, iters=5, backend="lattice", seed=0,
                         he_preset="desk")
    data = small_logistic()
    lat = run_protocol(cfg, data)
    ref = parity(lat, cfg, 5)
    assert np.max(np.abs(lat.trajectory.thetas - ref.thetas)) < 1e-3
