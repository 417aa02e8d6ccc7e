"""End-to-end acceptance checks.

Scenario runs are multi-process and take minutes; each is executed once per
session and shared by the checks that read it.  One PASS/FAIL line per
criterion is printed in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE, INSTANT
from fedfabric.apps.surrogate import rank, ucb_scores
from fedfabric.bench import metrics as M
from fedfabric.bench.scenarios import efficacy_overrides, run_scenario
from fedfabric.clock import WALL, VirtualClock
from fedfabric.config import RunConfig
from fedfabric.errors import PayloadTooLargeError
from fedfabric.refcore import ProxyPolicy, ProxyRule, ResolveCache, TaskPayload, proxy, restore, scan_and_proxy
from fedfabric.relay import RelayClient, RelayConfig, RelayServer, TaskDescriptor, Tier, new_id
from fedfabric.stores import StoreRegistry, build_backend, connect
from fedfabric.stores.local import FileSystemStore, InMemoryStore, WideAreaStore
from fedfabric.stores.model import NetworkModel, StoreConfig
from fedfabric.stores.server import StoreServer

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def check(metrics: dict, *names: str) -> tuple[bool, str]:
    found = {a["name"]: a for a in metrics["assertions"]}
    picked = [found[n] for n in names]
    return all(a["passed"] for a in picked), "; ".join(a["detail"] for a in picked)


# -- shared scenario runs ------------------------------------------------------------


@pytest.fixture(scope="session")
def runs_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="session")
def noop_run(runs_dir):
    return run_scenario("noop_tiering", None, runs_dir / "noop_tiering")


@pytest.fixture(scope="session")
def sweep_run(runs_dir):
    return run_scenario("backend_sweep", None, runs_dir / "backend_sweep")


@pytest.fixture(scope="session")
def offline_run(runs_dir):
    return run_scenario("offline_endpoint", None, runs_dir / "offline_endpoint")


@pytest.fixture(scope="session")
def moldesign_run(runs_dir):
    return run_scenario("moldesign", None, runs_dir / "moldesign")


@pytest.fixture(scope="session")
def efficacy_runs(runs_dir):
    t0 = time.monotonic()
    out = {}
    for seed in SEEDS:
        for strategy in ("ucb", "random"):
            out[strategy, seed] = run_scenario(
                "moldesign", efficacy_overrides(strategy, seed), runs_dir / f"efficacy-{strategy}-{seed}"
            )
    return out, time.monotonic() - t0


@pytest.fixture(scope="session")
def finetune_runs(runs_dir):
    return {seed: run_scenario("finetune", {"run": {"seed": seed}}, runs_dir / f"finetune-{seed}") for seed in SEEDS}


# -- 1: round trip -------------------------------------------------------------------


def random_payload(rng, size, i):
    n = int(rng.integers(1, 4))
    cuts = np.sort(rng.integers(0, size + 1, n - 1))
    parts = np.diff(np.r_[0, cuts, size])
    return TaskPayload(tuple((f"f{j}", rng.bytes(int(k))) for j, k in enumerate(parts)), {"i": str(i)})


def test_c01_round_trip_1000_payloads(tmp_path):
    clock = VirtualClock()
    reg = StoreRegistry({
        "kv": InMemoryStore("kv", INSTANT, clock=clock),
        "fs": FileSystemStore("fs", tmp_path / "fs", INSTANT, clock=clock),
        "wan": WideAreaStore("wan", tmp_path / "wan", INSTANT, clock=clock, staging_model=INSTANT),
    })
    rng = np.random.default_rng(20240101)
    limit = 10_000_000
    t0 = time.monotonic()
    failures, total, n_refs = [], 0, 0
    for i in range(1000):
        if i < 2:
            size = (0, limit)[i]
        elif i % 10 == 0:
            size = int(rng.integers(0, limit + 1))  # uniform, for large payloads
        else:
            size = int(math.exp(rng.uniform(0, math.log(limit))))  # log-uniform
        p = random_payload(rng, size, i)
        total += size
        for sid in ("kv", "fs", "wan"):
            policy = ProxyPolicy({"t": ProxyRule(int(rng.integers(0, size + 2)), sid)})
            proxied = scan_and_proxy(p, policy, "t", reg)
            wire_form = TaskPayload.from_bytes(proxied.to_bytes())
            if restore(wire_form, ResolveCache(reg)) != p:
                failures.append((i, sid, size))
            n_refs += len(proxied.references())
            for ref in proxied.references():
                reg.store(sid).delete(ref.object_key)
    elapsed = time.monotonic() - t0
    record(1, not failures and elapsed < 120,
           f"1000 payloads x 3 backends ({total / 1e9:.2f} GB, {n_refs} references), "
           f"{len(failures)} mismatches, {elapsed:.1f} s")


# -- 2: tiering ----------------------------------------------------------------------


def sized_payload(total):
    n = total
    for _ in range(8):
        p = TaskPayload.of(x=bytes(max(n, 0)))
        diff = len(p.to_bytes()) - total
        if diff == 0:
            return p
        n -= diff
    raise AssertionError(total)


def test_c02_tiering_exactness():
    server = RelayServer(RelayConfig())
    server.start()
    try:
        client = RelayClient(server.address)
        fid = client.register_function("noop")
        got = {}
        for size in (19_999, 20_000):
            p = sized_payload(size)
            assert len(p.to_bytes()) == size
            got[size] = client.submit(TaskDescriptor(new_id(), fid, "ep", "t", p))[1]
        try:
            client.submit(TaskDescriptor(new_id(), fid, "ep", "t", sized_payload(10_000_001)))
            rejected = False
        except PayloadTooLargeError:
            rejected = True
        at_limit = client.submit(TaskDescriptor(new_id(), fid, "ep", "t", sized_payload(10_000_000)))[1]
        client.close()
    finally:
        server.stop()
    ok = got[19_999] is Tier.FAST and got[20_000] is Tier.BLOB and rejected and at_limit is Tier.BLOB
    record(2, ok, f"19999 B -> {got[19_999].value}, 20000 B -> {got[20_000].value}, "
                  f"10000000 B -> {at_limit.value}, 10000001 B rejected={rejected}")


# -- 3, 4: transport trends ------------------------------------------------------------


def test_c03_noop_tiering(noop_run):
    ok, detail = check(noop_run, "proxy_speedup_large", "proxy_size_independent")
    wall = noop_run["wall_s"]
    record(3, ok and wall < 300, f"{detail}; {wall:.0f} s")


def test_c04_backend_sweep(sweep_run):
    ok, detail = check(sweep_run, "kv_serializes_faster_than_fs", "wide_area_time_on_worker_constant",
                       "wide_area_end_to_end_1MB")
    wall = sweep_run["wall_s"]
    record(4, ok and wall < 600, f"{detail}; {wall:.0f} s")


# -- 5, 6: resolve semantics ---------------------------------------------------------------


def resolve_wait_pairs(model: NetworkModel, n=20, seed=5):
    """(size, t, expected wait) with the finish time from the model's parameters."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        size = int(math.exp(rng.uniform(math.log(1_000), math.log(25_000_000))))
        finish = model.startup_latency_ms / 1e3 + size / model.bandwidth_bytes_per_s
        t = float(rng.uniform(0, 1.3 * finish)) if i % 5 else 0.0
        out.append((size, t, max(0.0, finish - t)))
    return out


def measure_resolve_waits(store, clock, pairs):
    errors = []
    for size, t, expected in pairs:
        data = bytes(size)
        ref = proxy(data, store)
        t_put = clock.now()
        clock.sleep_until(t_put + t) if hasattr(clock, "sleep_until") else clock.sleep(t_put + t - clock.now())
        t0 = clock.now()
        assert store.get(ref.object_key) == data
        errors.append(abs((clock.now() - t0) - expected))
    return errors


def test_c05_resolve_wait(tmp_path):
    model = NetworkModel.from_dict({}, StoreConfig.from_dict({"store_id": "w", "kind": "wide-area"}).network)
    assert (model.request_latency_ms, model.startup_latency_ms, model.bandwidth_bytes_per_s) == (500, 1000, 50e6)
    pairs = resolve_wait_pairs(model)
    vclock = VirtualClock()
    virtual = measure_resolve_waits(WideAreaStore("w", tmp_path / "v", model, vclock), vclock, pairs)
    wall = measure_resolve_waits(WideAreaStore("w", tmp_path / "r", model, WALL), WALL, pairs)
    ok = max(virtual) <= 1e-3 and max(wall) <= 0.1
    record(5, ok, f"{len(pairs)} (size, t) pairs; max error virtual {max(virtual) * 1e3:.3f} ms, "
                  f"wall {max(wall) * 1e3:.1f} ms")


def test_c06_cache_effectiveness(tmp_path):
    cfg = StoreConfig.from_dict({"store_id": "wan", "kind": "wide-area", "staging_dir": str(tmp_path)})
    server = StoreServer(build_backend(cfg), port=0)
    server.start()
    try:
        cfg.port = int(server.address.rsplit(":", 1)[1])
        thinker_side, endpoint_side = connect(cfg), connect(cfg)
        ref = proxy(np.random.default_rng(0).bytes(1_000_000), thinker_side)
        cache = ResolveCache(StoreRegistry({"wan": endpoint_side}))
        t0 = time.perf_counter()
        first = cache.fetch(ref)
        t1 = time.perf_counter()
        gets = endpoint_side.stats().gets
        second = cache.fetch(ref)
        t2 = time.perf_counter()
        extra_gets = endpoint_side.stats().gets - gets
        thinker_side.close()
        endpoint_side.close()
    finally:
        server.stop()
    first_s, second_s = t1 - t0, t2 - t1
    ok = first == second and extra_gets == 0 and second_s < 0.1 * first_s
    record(6, ok, f"first resolve {first_s * 1e3:.1f} ms, second {second_s * 1e3:.3f} ms, "
                  f"{extra_gets} store gets on the second")


# -- 7: store and forward ----------------------------------------------------------------------


def test_c07_offline_endpoint(offline_run):
    ok, detail = check(offline_run, "delivered_exactly_once", "tasks_held_while_endpoint_offline",
                       "results_held_while_client_offline")
    record(7, ok, detail)


# -- 8, 9: steering on the default scenario ---------------------------------------------------------


def test_c08_utilization(moldesign_run):
    ok, detail = check(moldesign_run, "cpu_utilization", "idle_gap_median")
    cfg = moldesign_run["app"]["config"]
    record(8, ok, f"{detail}; {moldesign_run['wall_s']:.0f} s run, sim {cfg['sim_duration_s']} s scaled")


def test_c09_decision_latency(moldesign_run):
    ok, detail = check(moldesign_run, "decision_latency")
    record(9, ok, detail)


# -- 10: UCB ordering -----------------------------------------------------------------------------


def naive_ucb_order(preds):
    k, n = len(preds), len(preds[0])
    scored = []
    for j in range(n):
        col = [preds[i][j] for i in range(k)]
        mean = sum(col) / k
        var = sum((c - mean) ** 2 for c in col) / k
        scored.append((mean + math.sqrt(var), j))
    return [j for _, j in sorted(scored, key=lambda s: (-s[0], s[1]))]


def test_c10_ucb_oracle():
    rng = np.random.default_rng(10)
    mismatches = 0
    for trial in range(100):
        n = int(rng.integers(1, 400))
        preds = rng.normal(size=(8, n))
        if trial % 2:
            preds = np.round(preds)  # plenty of exact ties
        if rank(ucb_scores(preds)) != naive_ucb_order(preds.tolist()):
            mismatches += 1
    record(10, mismatches == 0, f"100 matrices of 8 members, {mismatches} ordering mismatches")


# -- 11: efficacy -------------------------------------------------------------------------------------


def test_c11_steering_efficacy(efficacy_runs):
    runs, wall = efficacy_runs
    per_seed = []
    for seed in SEEDS:
        u, r = runs["ucb", seed]["app"], runs["random", seed]["app"]
        assert u["threshold"] == r["threshold"] and u["budget_s"] == r["budget_s"]
        per_seed.append((u["found"], r["found"], u["counted_simulations"], r["counted_simulations"]))
    ucb = np.mean([p[0] for p in per_seed])
    rnd = np.mean([p[1] for p in per_seed])
    ratio = ucb / rnd if rnd else math.inf
    seeds = ", ".join(f"seed {s}: {a}/{c} vs {b}/{d}" for s, (a, b, c, d) in zip(SEEDS, per_seed))
    record(11, ratio >= 1.3 and wall < 900, f"ucb/random found ratio {ratio:.2f} ({seeds}); {wall:.0f} s total")


# -- 12: fine-tuning ------------------------------------------------------------------------------------


def test_c12_finetune_improves(finetune_runs):
    rows = [(s, r["app"]["pre_rms"], r["app"]["best_rms"]) for s, r in finetune_runs.items()]
    ok = all(pre is not None and best is not None and best < pre for _, pre, best in rows)
    record(12, ok, "; ".join(f"seed {s}: {pre:.4f} -> {best:.4f}" for s, pre, best in rows))


# -- 13: accounting ---------------------------------------------------------------------------------------


def test_c13_accounting_sweep(runs_dir, noop_run, sweep_run, offline_run, moldesign_run, efficacy_runs, finetune_runs):
    dirs = sorted(p for p in runs_dir.iterdir() if (p / "config.json").exists())
    expected = 4 + len(efficacy_runs[0]) + len(finetune_runs)
    checked, problems = 0, []
    for d in dirs:
        cfg = RunConfig.load(d / "config.json")
        analysis = M.derive_breakdowns(d, {e.endpoint_id: e.worker_slots for e in cfg.endpoints.values()})
        checked += len(analysis.tasks)
        problems += [f"{d.name}: {p}" for p in M.check_accounting(analysis)]
    detail = f"{len(dirs)} scenario logs, {checked} tasks, {len(problems)} violations"
    if problems:
        detail += f"; first: {problems[0]}"
    record(13, len(dirs) == expected and checked > 0 and not problems, detail)
