import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crmsim.domain import CapacityError, PoolFullError, PowerState, StateError
from crmsim.hypervisor import HypervisorConfig, SimHypervisor

from helpers import RV, add_vm, host, make_cluster, template


def setup(pool_gib=10_000, **host_kw):
    c = make_cluster([host("h1", **host_kw), host("h2", freq=3000, **host_kw)], [template("t", 2, 4096, 5, image=10)], pool_gib=pool_gib)
    return c, SimHypervisor(c)


def test_power_on_completes_after_boot_time():
    c, hv = setup()
    vm = add_vm(c, "v", "t", "h1")
    done = hv.power_on("v", 100)
    assert done == 160
    assert vm.power is PowerState.BOOTING and vm.offline_flag
    assert c.hosts["h1"].allocated == RV(2, 4096, 5) and c.hosts["h1"].used_slots == 1
    hv.finish_boot("v", done)
    assert vm.power is PowerState.ONLINE and vm.powered_on_at == 160


def test_power_on_wrong_state_changes_nothing():
    c, hv = setup()
    add_vm(c, "v", "t", "h1", PowerState.ONLINE)
    before = c.hosts["h1"].allocated
    with pytest.raises(StateError):
        hv.power_on("v", 0)
    assert c.hosts["h1"].allocated == before


def test_power_on_refused_when_it_would_overbook():
    c, hv = setup(cores=2)
    add_vm(c, "a", "t", "h1", PowerState.ONLINE)
    add_vm(c, "b", "t", "h1")
    with pytest.raises(CapacityError):
        hv.power_on("b", 0)
    assert c.vms["b"].power is PowerState.POWERED_OFF
    assert not c.hosts["h1"].overbooked


def test_power_off_releases_what_power_on_took():
    c, hv = setup()
    vm = add_vm(c, "v", "t", "h1")
    before = (c.hosts["h1"].allocated, c.hosts["h1"].used_slots)
    hv.finish_boot("v", hv.power_on("v", 0))
    done = hv.power_off("v", 200)
    assert done == 220 and vm.power is PowerState.SHUTTING_DOWN
    assert c.hosts["h1"].used_slots == 1  # held until shutdown completes
    hv.finish_shutdown("v", done)
    assert vm.power is PowerState.POWERED_OFF
    assert (c.hosts["h1"].allocated, c.hosts["h1"].used_slots) == before


def test_power_off_refuses_busy_vm():
    c, hv = setup()
    vm = add_vm(c, "v", "t", "h1", PowerState.ONLINE)
    vm.running_job_ids.add("j")
    with pytest.raises(StateError):
        hv.power_off("v", 0)
    assert vm.power is PowerState.ONLINE


def test_cold_migrate_then_power_on_latency():
    c, hv = setup()
    vm = add_vm(c, "v", "t", "h1")
    t = hv.cold_migrate("v", "h2", 0)
    assert t == 5
    hv.finish_migrate("v", t)
    assert vm.host_id == "h2" and "v" in c.hosts["h2"].resident_vm_ids and "v" not in c.hosts["h1"].resident_vm_ids
    assert hv.power_on("v", t) == 65
    assert c.pool.images == {"v": 10}


def test_cold_migrate_refuses_online_vm():
    c, hv = setup()
    add_vm(c, "v", "t", "h1", PowerState.ONLINE)
    with pytest.raises(StateError):
        hv.cold_migrate("v", "h2", 0)


def test_clone_duration_and_pool():
    c, hv = setup()
    vm_id, done = hv.clone("t", 0, "h2")
    assert done == 300
    vm = c.vms[vm_id]
    assert vm.power is PowerState.CLONING and vm.offline_flag and vm.host_id == "h2"
    assert c.pool.used_gib == 10
    hv.finish_clone(vm_id, done)
    assert vm.power is PowerState.POWERED_OFF


def test_clone_with_full_pool_changes_nothing():
    c, hv = setup(pool_gib=15)
    add_vm(c, "v", "t", "h1")
    snapshot = (dict(c.pool.images), set(c.vms), dict(c.hosts["h2"].resident_vm_ids))
    with pytest.raises(PoolFullError):
        hv.clone("t", 0, "h2")
    assert (dict(c.pool.images), set(c.vms), dict(c.hosts["h2"].resident_vm_ids)) == snapshot


def test_destroy():
    c, hv = setup()
    add_vm(c, "off", "t", "h1")
    add_vm(c, "on", "t", "h1", PowerState.ONLINE)
    hv.destroy("off", 0)
    assert "off" not in c.vms and c.pool.used_gib == 10
    with pytest.raises(StateError):
        hv.destroy("on", 0)


def test_clone_destroy_round_trip():
    c, hv = setup()
    add_vm(c, "v", "t", "h1")
    before = c.pool.used_gib
    vm_id, done = hv.clone("t", 0, "h1")
    hv.finish_clone(vm_id, done)
    hv.destroy(vm_id, done)
    assert c.pool.used_gib == before
    c.check_integrity()


def test_config_rejects_negative_latency():
    with pytest.raises(ValueError):
        HypervisorConfig(boot_time_s=-1)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["on", "off", "clone", "destroy", "migrate"]), st.integers(0, 5)), max_size=60))
def test_random_operation_sequences_never_overbook(ops):
    c = make_cluster(
        [host("h1", cores=4, ram=9216, slots=3), host("h2", cores=4, ram=9216, slots=3, freq=3000)],
        [template("t", 2, 4096, 5, image=10)],
        pool_gib=80,
    )
    hv = SimHypervisor(c)
    for n in range(6):
        add_vm(c, f"v{n}", "t", "h1" if n % 2 else "h2")
    ledger = dict(c.pool.images)
    now = 0
    for op, k in ops:
        now += 1
        ids = sorted(c.vms)
        vm_id = ids[k % len(ids)] if ids else None
        try:
            if op == "on" and vm_id:
                hv.finish_boot(vm_id, hv.power_on(vm_id, now))
            elif op == "off" and vm_id:
                hv.finish_shutdown(vm_id, hv.power_off(vm_id, now))
            elif op == "clone":
                new, done = hv.clone("t", now, "h1")
                hv.finish_clone(new, done)
                ledger[new] = 10
            elif op == "destroy" and vm_id:
                hv.destroy(vm_id, now)
                del ledger[vm_id]
            elif op == "migrate" and vm_id:
                dest = "h2" if c.vms[vm_id].host_id == "h1" else "h1"
                hv.finish_migrate(vm_id, hv.cold_migrate(vm_id, dest, now))
        except (StateError, CapacityError, PoolFullError):
            pass
        for h in c.hosts.values():
            assert not h.overbooked
        assert c.pool.used_gib <= c.pool.capacity_gib
        assert c.pool.images == ledger
        c.check_integrity()
