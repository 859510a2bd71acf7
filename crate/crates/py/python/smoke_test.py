"""Smoke test for the cbac extension module.

Build first, e.g. `maturin develop` in crates/py, or copy the cdylib built
with `--features extension-module` next to this script as cbac.so.
"""

import cbac

DATASET = "\n".join(
    [
        "kind=user\tid=hp1\trole=professional",
        "kind=user\tid=hp2\trole=professional",
        "kind=user\tid=pt1\trole=patient",
        "kind=episode\tid=e1\tcreator=hp1\tpatient=pt1\ttags=Respiratory",
        "kind=record\tid=r1\tepisode=e1\tcategory=note",
        "kind=record\tid=r2\tepisode=e1\tcategory=lab",
        "kind=episode\tid=e2\tcreator=hp1\tpatient=pt1\ttags=Dermatology",
        "kind=record\tid=r3\tepisode=e2\tcategory=note",
    ]
)


def main():
    eng = cbac.Engine(DATASET, key_seed=bytes(32))

    assert eng.decide("hp2", "professional", "episode:e1").outcome == "deny"
    assert eng.decide("hp1", "professional", "episode:e1").basis == "invariant_author"
    assert eng.decide("pt1", "patient", "record:r3").basis == "invariant_subject"

    a = eng.submit("c1", "hp2", "episode:e1", "permit", start=0, end=100)
    assert a.outcome == "accepted", a
    assert eng.submit("c2", "hp2", "episode:e1", "deny").outcome == "conflict"
    assert eng.submit("c3", "hp2", "episode:e1", "permit", start=10, end=50).outcome == "redundant"
    assert eng.submit("c4", "hp1", "episode:e1", "deny").outcome == "invariant_violation"
    assert eng.active_count == 1
    assert eng.violation_count() == 0

    d = eng.decide("hp2", "professional", "record:r2", ts=50)
    assert d.is_permit() and d.witness == "c1", d
    assert not eng.decide("hp2", "professional", "record:r2", ts=100).is_permit()
    eng.revoke("c1", 60)
    assert not eng.decide("hp2", "professional", "record:r2", ts=70).is_permit()

    b = eng.emergency("hp2", "pt1", [("spo2", 85.0), ("heartRate", 80.0)], now=1000)
    assert b.states == ["Hypoxia"], b.states
    assert b.records == ["r1", "r2"], b.records
    assert (b.disclosed, b.total) == (2, 3)
    assert "disclosed" in eng.audit_log()

    try:
        eng.emergency("hp2", "pt1", [("spo2", 99.0)], now=1000)
    except PermissionError:
        pass
    else:
        raise AssertionError("normal vitals must not open an override")

    assert cbac.emergency_states([("glucose", 50.0)]) == ["Hypoglycemia"]
    assert cbac.disclosure_scope([("spo2", 99.0)]) == []
    disclosed, total, eta, pruned = cbac.emergency_case("Hypoxia", 500, 110, seed=1)
    assert (disclosed, total) == (110, 500) and abs(eta - 0.22) < 1e-12

    synth = cbac.Engine.synthetic(50, seed=3)
    assert synth.dataset().startswith("kind=user")
    print("smoke test passed")


if __name__ == "__main__":
    main()
