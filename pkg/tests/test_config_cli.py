"""Config validation, the experiment runner, and the command-line client.

Validation cases mutate a shared minimal mapping and feed it through
``parse_config``; runner and CLI cases execute the shipped smoke config
into tmp directories and compare the emitted trees byte for byte.
"""
import hashlib
import json
from pathlib import Path

import pytest
import yaml

from sevlab import __version__
from sevlab.cli import main
from sevlab.config import (
    ConfigInvalid,
    build_perturbation,
    build_template,
    config_sha256,
    load_config,
    parse_config,
)
from sevlab.runner import (
    EXIT_FAILED,
    EXIT_INVALID,
    EXIT_OK,
    ExperimentFailed,
    run_config,
    run_config_file,
)

SMOKE = Path(__file__).resolve().parent.parent / "configs" / "smoke.cfg"


def base_mapping() -> dict:
    """Minimal valid document: scalar Wiener problem, one cheap sweep."""
    return {
        "name": "unit",
        "base_seed": 3,
        "paths": 8,
        "space": {"dim": 1, "eigenvalues": [1.0]},
        "grid": {"horizon": 0.5, "steps": 10},
        "driver": {"kind": "wiener", "q": [1.0]},
        "initial": {"mean": [1.0]},
        "diffusion": {"family": "additive_constant", "params": {"value": 0.5}},
        "experiments": [
            {"theorem": "yo2sc", "values": [0.1, 0.01],
             "rule": {"final_ratio": 0.9}},
        ],
    }


def parse(mapping: dict):
    return parse_config(yaml.safe_dump(mapping))


def tree_bytes(root: Path) -> dict:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


# -- parsing ---------------------------------------------------------------

def test_smoke_config_parses_with_expected_fields():
    config, raw = load_config(SMOKE)
    assert config.name == "smoke"
    assert config.base_seed == 11
    assert config.paths == 100
    assert config.space.dim == 1 and config.space.eigenvalues == [1.0]
    assert config.grid.horizon == 1.0 and config.grid.steps == 50
    assert config.driver.kind == "wiener" and config.driver.q == [1.0]
    assert config.diffusion.family == "additive_constant"
    assert [e.theorem for e in config.experiments] == [
        "yo2sc", "titikaka", "cor_utile",
    ]
    assert config.experiments[1].closed_form and config.experiments[1].forcing == [1.0]
    assert config_sha256(raw) == hashlib.sha256(SMOKE.read_bytes()).hexdigest()


def test_yaml_and_root_shape_errors():
    with pytest.raises(ConfigInvalid, match="not valid YAML"):
        parse_config("experiments: [unclosed")
    with pytest.raises(ConfigInvalid, match="root must be a mapping"):
        parse_config("- just\n- a list\n")


def test_unknown_keys_are_rejected():
    bad = base_mapping()
    bad["surprise"] = 1
    with pytest.raises(ConfigInvalid, match="[Ee]xtra"):
        parse(bad)
    nested = base_mapping()
    nested["grid"]["step"] = 10  # typo for "steps"
    with pytest.raises(ConfigInvalid, match="[Ee]xtra"):
        parse(nested)


def test_space_section_constraints():
    both = base_mapping()
    both["space"] = {"dim": 1, "eigenvalues": [1.0], "family": "heat"}
    with pytest.raises(ConfigInvalid, match="either explicit eigenvalues or a family"):
        parse(both)
    neither = base_mapping()
    neither["space"] = {"dim": 1}
    with pytest.raises(ConfigInvalid, match="either explicit eigenvalues or a family"):
        parse(neither)
    short = base_mapping()
    short["space"] = {"dim": 3, "eigenvalues": [1.0]}
    with pytest.raises(ConfigInvalid, match="eigenvalue count must equal dim"):
        parse(short)


def test_driver_section_constraints():
    cases = [
        ({"kind": "wiener"}, "wiener driver needs q"),
        ({"kind": "cpoisson", "jump_values": [[1.0], [-1.0]],
          "jump_probs": [0.5, 0.5]}, "needs rate"),
        ({"kind": "cpoisson", "rate": 2.0}, "jump atoms or gaussian_cov"),
        ({"kind": "prm", "marks": [[1.0]]}, "marks and weights"),
    ]
    for driver, message in cases:
        bad = base_mapping()
        bad["driver"] = driver
        with pytest.raises(ConfigInvalid, match=message):
            parse(bad)


def test_entry_level_constraints():
    few_paths = base_mapping()
    few_paths["paths"] = 1
    with pytest.raises(ConfigInvalid, match="greater than or equal to 2"):
        parse(few_paths)
    unknown = base_mapping()
    unknown["experiments"][0]["theorem"] = "yo3sc"
    with pytest.raises(ConfigInvalid, match="unknown theorem id"):
        parse(unknown)
    single = base_mapping()
    single["experiments"][0]["values"] = [0.1]
    with pytest.raises(ConfigInvalid, match="at least two parameter values"):
        parse(single)


def test_coupling_shape_constraints():
    mean = base_mapping()
    mean["initial"]["mean"] = [1.0, 2.0]
    with pytest.raises(ConfigInvalid, match="initial mean dimension"):
        parse(mean)

    both = base_mapping()
    both["jump"] = {"family": "additive_mark", "params": {"amplitude": [[0.1]]}}
    with pytest.raises(ConfigInvalid, match="either a diffusion or a jump"):
        parse(both)

    prm_no_jump = base_mapping()
    prm_no_jump["driver"] = {"kind": "prm", "marks": [[1.0]], "weights": [2.0]}
    del prm_no_jump["diffusion"]
    with pytest.raises(ConfigInvalid, match="prm driver needs a jump coefficient"):
        parse(prm_no_jump)

    jump_no_prm = base_mapping()
    del jump_no_prm["diffusion"]
    jump_no_prm["jump"] = {"family": "additive_mark", "params": {"amplitude": [[0.1]]}}
    with pytest.raises(ConfigInvalid, match="jump coefficients need a prm driver"):
        parse(jump_no_prm)

    orphan = base_mapping()
    del orphan["driver"]
    with pytest.raises(ConfigInvalid, match="coefficient declared without a driver"):
        parse(orphan)


def test_perturbation_section_constraints():
    empty = base_mapping()
    empty["perturbation"] = {}
    with pytest.raises(ConfigInvalid, match="at least one ingredient"):
        parse(empty)
    no_vector = base_mapping()
    no_vector["perturbation"] = {"coupling": {"mode": "offset"}}
    with pytest.raises(ConfigInvalid, match="offset mode needs an offset vector"):
        parse(no_vector)


# -- builders --------------------------------------------------------------

def test_build_template_requires_a_diffusion_for_martingale_drivers():
    bare = base_mapping()
    del bare["diffusion"]
    config = parse(bare)
    with pytest.raises(ConfigInvalid, match="without a diffusion"):
        build_template(config, 2.0)


def test_build_perturbation_guards():
    config = parse(base_mapping())
    template = build_template(config, 2.0)
    with pytest.raises(ConfigInvalid, match="needs a perturbation section"):
        build_perturbation(config, template)

    no_drift = base_mapping()
    no_drift["perturbation"] = {"drift": {"mode": "scale"}}
    config = parse(no_drift)
    with pytest.raises(ConfigInvalid, match="drift perturbation declared without"):
        build_perturbation(config, build_template(config, 2.0))

    deterministic = base_mapping()
    del deterministic["driver"]
    del deterministic["diffusion"]
    deterministic["perturbation"] = {"coupling": {"mode": "scale"}}
    config = parse(deterministic)
    with pytest.raises(ConfigInvalid, match="coupling perturbation declared without"):
        build_perturbation(config, build_template(config, 2.0))

    wide = base_mapping()
    wide["perturbation"] = {"initial_offset": [0.1, 0.2]}
    config = parse(wide)
    with pytest.raises(ConfigInvalid, match="initial offset dimension"):
        build_perturbation(config, build_template(config, 2.0))


def test_initial_offset_sequence_shrinks_like_one_over_n():
    cfg = base_mapping()
    cfg["perturbation"] = {"initial_offset": [0.4]}
    config = parse(cfg)
    spec = build_perturbation(config, build_template(config, 2.0))
    assert spec.initial_offset(4) == pytest.approx([0.1])


# -- runner ----------------------------------------------------------------

def test_run_config_file_is_byte_deterministic(tmp_path):
    first = run_config_file(SMOKE, tmp_path / "a")
    second = run_config_file(SMOKE, tmp_path / "b")
    assert first.exit_code == EXIT_OK and first.all_passed
    bytes_a = tree_bytes(tmp_path / "a")
    bytes_b = tree_bytes(tmp_path / "b")
    assert set(bytes_a) == set(bytes_b)
    assert all(bytes_a[name] == bytes_b[name] for name in bytes_a)
    # manifest paths are relative, so the trees compare equal across roots
    assert "manifest.json" in bytes_a
    assert "yo2sc/report.csv" in bytes_a and "yo2sc/plot.csv" in bytes_a
    assert "cor_utile/envelope.csv" in bytes_a
    second.raise_for_status()  # everything passed, so this is a no-op


def test_worker_count_does_not_change_output_bytes(tmp_path):
    config, raw = load_config(SMOKE)
    run_config(config, raw, tmp_path / "serial", workers=1)
    run_config(config, raw, tmp_path / "pool", workers=3)
    serial = tree_bytes(tmp_path / "serial")
    pool = tree_bytes(tmp_path / "pool")
    assert serial == pool


def test_manifest_records_run_metadata(tmp_path):
    outcome = run_config_file(SMOKE, tmp_path)
    manifest = outcome.manifest
    assert manifest["name"] == "smoke"
    assert manifest["version"] == __version__
    assert manifest["base_seed"] == 11 and manifest["paths"] == 100
    assert manifest["config_sha256"] == hashlib.sha256(SMOKE.read_bytes()).hexdigest()
    assert "seed_override" not in manifest
    labels = [e["label"] for e in manifest["experiments"]]
    assert labels == ["yo2sc", "titikaka", "cor_utile"]
    for entry in manifest["experiments"]:
        assert entry["passed"]
        assert entry["report"] == f"{entry['label']}/report.csv"
    # the file on disk is exactly the sorted, indented rendering plus newline
    on_disk = (tmp_path / "manifest.json").read_bytes()
    assert on_disk == (
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    ).encode()


def test_seed_override_is_recorded_and_changes_results(tmp_path):
    config, raw = load_config(SMOKE)
    base = run_config(config, raw, tmp_path / "base")
    shifted = run_config(config, raw, tmp_path / "shifted", seed_override=999)
    assert shifted.manifest["seed_override"] == 999
    assert shifted.manifest["base_seed"] == 999
    assert base.manifest["base_seed"] == 11
    report = "yo2sc/report.csv"
    assert tree_bytes(tmp_path / "base")[report] != tree_bytes(tmp_path / "shifted")[report]


def test_duplicate_theorems_get_suffixed_labels(tmp_path):
    doc = base_mapping()
    doc["experiments"] = [
        {"theorem": "yo2sc", "values": [0.1, 0.01], "rule": {"final_ratio": 0.9}},
        {"theorem": "yo2sc", "values": [0.2, 0.02], "rule": {"final_ratio": 0.9}},
    ]
    raw = yaml.safe_dump(doc).encode()
    outcome = run_config(parse(doc), raw, tmp_path)
    labels = [e["label"] for e in outcome.manifest["experiments"]]
    assert labels == ["yo2sc", "yo2sc_2"]
    assert (tmp_path / "yo2sc_2" / "report.csv").exists()


def test_failing_rule_fails_run_but_still_writes_reports(tmp_path):
    doc = base_mapping()
    doc["experiments"][0]["rule"] = {"final_error": 1e-30}
    raw = yaml.safe_dump(doc).encode()
    outcome = run_config(parse(doc), raw, tmp_path)
    assert outcome.exit_code == EXIT_FAILED and not outcome.all_passed
    assert (tmp_path / "yo2sc" / "report.csv").exists()
    entry = outcome.manifest["experiments"][0]
    assert entry["passed"] is False and entry["fail_reasons"]
    with pytest.raises(ExperimentFailed, match="experiments failed: yo2sc"):
        outcome.raise_for_status()


def test_broken_experiment_does_not_abort_siblings(tmp_path):
    # a negative regularization parameter passes schema validation (values
    # are plain floats) and only blows up once the sweep starts
    doc = base_mapping()
    doc["experiments"] = [
        {"theorem": "yo2sc", "values": [-0.1, 0.01]},
        {"theorem": "yo2sc", "values": [0.1, 0.01], "rule": {"final_ratio": 0.9}},
    ]
    raw = yaml.safe_dump(doc).encode()
    outcome = run_config(parse(doc), raw, tmp_path)
    assert not outcome.all_passed
    broken, healthy = outcome.manifest["experiments"]
    assert broken["passed"] is False
    assert "must be positive" in broken["error"]
    assert "report" not in broken
    assert (tmp_path / "yo2sc" / "error.txt").exists()
    assert healthy["passed"] is True
    assert healthy["label"] == "yo2sc_2"


def test_closed_form_reference_needs_a_diagonal_operator(tmp_path):
    doc = base_mapping()
    del doc["driver"]
    del doc["diffusion"]
    doc["space"] = {"dim": 2, "eigenvalues": [1.0, 2.0], "basis_seed": 7}
    doc["initial"] = {"mean": [1.0, 0.5]}
    doc["experiments"] = [
        {"theorem": "titikaka", "values": [1, 2, 4], "closed_form": True},
    ]
    with pytest.raises(ConfigInvalid, match="diagonal operator"):
        run_config(parse(doc), b"", tmp_path)


def test_entries_enforce_their_declared_driver_kinds(tmp_path):
    # lemma_treppe audits jump couplings; this config drives a martingale
    doc = base_mapping()
    doc["perturbation"] = {"initial_offset": [0.1]}
    doc["experiments"] = [
        {"theorem": "lemma_treppe", "values": [1, 2]},
    ]
    with pytest.raises(ConfigInvalid, match="expects driver kind"):
        run_config(parse(doc), b"", tmp_path)

    silent = base_mapping()
    del silent["driver"]
    del silent["diffusion"]
    with pytest.raises(ConfigInvalid, match="needs a noise driver"):
        run_config(parse(silent), b"", tmp_path)


def test_default_output_directory_comes_from_stem_or_config(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    doc = base_mapping()
    Path("mini.cfg").write_text(yaml.safe_dump(doc))
    run_config_file("mini.cfg")
    assert (tmp_path / "mini_reports" / "manifest.json").exists()

    doc["output"] = "chosen_out"
    Path("routed.cfg").write_text(yaml.safe_dump(doc))
    run_config_file("routed.cfg")
    assert (tmp_path / "chosen_out" / "manifest.json").exists()
    assert not (tmp_path / "routed_reports").exists()


# -- command line ----------------------------------------------------------

def test_cli_run_reports_pass_and_exits_zero(tmp_path, capsys):
    rc = main(["run", str(SMOKE), "--out", str(tmp_path / "out")])
    out = capsys.readouterr().out
    assert rc == EXIT_OK
    assert "all passed" in out
    assert "yo2sc" in out and "PASS" in out
    assert (tmp_path / "out" / "manifest.json").exists()


def test_cli_run_exits_one_on_failed_rule(tmp_path, capsys):
    doc = base_mapping()
    doc["experiments"][0]["rule"] = {"final_error": 1e-30}
    cfg = tmp_path / "failing.cfg"
    cfg.write_text(yaml.safe_dump(doc))
    rc = main(["run", str(cfg), "--out", str(tmp_path / "out")])
    out = capsys.readouterr().out
    assert rc == EXIT_FAILED
    assert "FAILED" in out
    # reports are still materialized for post-mortem
    assert (tmp_path / "out" / "yo2sc" / "report.csv").exists()


def test_cli_run_exits_two_on_invalid_config(tmp_path, capsys):
    doc = base_mapping()
    doc["paths"] = 1
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(yaml.safe_dump(doc))
    rc = main(["run", str(cfg)])
    err = capsys.readouterr().err
    assert rc == EXIT_INVALID
    assert "invalid config" in err

    rc = main(["run", str(tmp_path / "missing.cfg")])
    err = capsys.readouterr().err
    assert rc == EXIT_INVALID
    assert "invalid config" in err


def test_cli_list_prints_registry(capsys):
    assert main(["list"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 15

    assert main(["list", "--filter", "yosida"]) == EXIT_OK
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    assert {line.split()[0] for line in lines} == {"yo2sc", "yopsc"}

    assert main(["list", "--filter", "zzz-not-there"]) == EXIT_OK
    assert capsys.readouterr().out.strip() == ""


def test_cli_seed_flag_matches_runner_override(tmp_path):
    rc = main([
        "run", str(SMOKE), "--out", str(tmp_path / "cli"), "--seed", "999",
    ])
    assert rc == EXIT_OK
    config, raw = load_config(SMOKE)
    run_config(config, raw, tmp_path / "direct", seed_override=999)
    assert tree_bytes(tmp_path / "cli") == tree_bytes(tmp_path / "direct")
