import pytest

from skiff.launchsim import CostModel, IncompleteTraceError, build_cluster, run_job_step
from skiff.bench import (ROW_LABELS, STARTUP, RUNTIME_PREP, JOIN, TOTAL, PynamicWorkload, measure_startup,
                         pynamic_run, sample_image, startup_bench)
from skiff.plot import plot_pynamic, plot_startup


EDF = 'image = "ubuntu:24.04"\nworkdir = "/"\n'


@pytest.fixture(scope='module')
def startup():
    cluster = build_cluster(4, 4, seed=5)
    cluster.publish(sample_image())
    return startup_bench(cluster, EDF, reps=10)


def test_startup_rows(startup):
    table, traces = startup
    assert len(traces) == 10 and all(t.mode == 'warm' for t in traces)
    assert [r.label for r in table.rows] == list(ROW_LABELS)
    assert table.samples == 40
    assert table.row(TOTAL).mean == pytest.approx(table.row(STARTUP).mean + table.row(RUNTIME_PREP).mean)
    assert table.row(JOIN).maximum <= CostModel().join_bound
    assert 0.5 < table.row(STARTUP).mean < 2.0
    assert table.row(JOIN).mean < table.row(RUNTIME_PREP).mean


def test_startup_outputs(startup, tmp_path):
    table, _ = startup
    text = table.to_text()
    assert text.splitlines()[0].endswith('(n=40)')
    assert '<= 0.001' in text
    assert len(table.to_jsonl().splitlines()) == 4
    plot_startup(table, str(tmp_path / 'startup.png'))
    assert (tmp_path / 'startup.png').stat().st_size > 0


def test_measure_needs_completed_traces():
    cluster = build_cluster(1, 1)
    failed = run_job_step(cluster, EDF, mode='warm')
    with pytest.raises(IncompleteTraceError):
        measure_startup([failed])
    with pytest.raises(IncompleteTraceError):
        measure_startup([])


def test_cold_failure_stops_bench():
    with pytest.raises(IncompleteTraceError):
        startup_bench(build_cluster(1, 1), EDF, reps=1)


def test_workload_must_add_up():
    with pytest.raises(ValueError):
        PynamicWorkload(files=10, modules=3, libraries=3)


def test_pynamic_at_64_nodes():
    workload = PynamicWorkload()
    plain = pynamic_run(build_cluster(64, 1), workload, 'plain')
    squashed = pynamic_run(build_cluster(64, 1), workload, 'squashed')
    assert plain.store_metadata_ops >= 64 * workload.files
    assert squashed.store_metadata_ops * 100 < plain.store_metadata_ops
    assert squashed.index_lookups > 0
    assert squashed.total < plain.total
    assert len(set(squashed.node_metadata_ops)) == 1


def test_squashed_node_cost_ignores_file_count():
    small = pynamic_run(build_cluster(2, 1), PynamicWorkload(files=50, modules=30, libraries=20), 'squashed')
    large = pynamic_run(build_cluster(2, 1), PynamicWorkload(), 'squashed')
    assert small.node_metadata_ops == large.node_metadata_ops
    plain_small = pynamic_run(build_cluster(2, 1), PynamicWorkload(files=50, modules=30, libraries=20), 'plain')
    plain_large = pynamic_run(build_cluster(2, 1), PynamicWorkload(), 'plain')
    assert plain_large.node_metadata_ops[0] > plain_small.node_metadata_ops[0]


def test_pynamic_scaling_and_plot(tmp_path):
    reports = [pynamic_run(build_cluster(n, 1), layout=layout) for layout in ('plain', 'squashed') for n in (1, 4)]
    plain = {r.nodes: r for r in reports if r.layout == 'plain'}
    assert plain[4].store_metadata_ops == 4 * plain[1].store_metadata_ops
    assert 'plain layout, 4 node(s)' in plain[4].to_text()
    assert plot_pynamic(reports, str(tmp_path / 'pynamic.png')).endswith('pynamic.png')
    with pytest.raises(ValueError):
        pynamic_run(build_cluster(1, 1), layout='zipped')
