import pytest

from dtkd.harness import DataConfig, ExperimentConfig, train_teacher
from dtkd.net import TrainSchedule

TINY_CONFIG_TEXT = """\
experiment.id = tiny
data.n_classes = 3
data.dim = 4
data.n_train = 60
data.n_test = 30
teacher.hidden = 8
student.hidden = 4
schedule.epochs = 4
schedule.warmup_epochs = 1
schedule.decay_milestones = 3
schedule.batch_size = 16
"""


def tiny_experiment(**kwargs) -> ExperimentConfig:
    base = dict(
        data=DataConfig(n_classes=3, dim=4, n_train=60, n_test=30),
        teacher_hidden=(8,),
        student_hidden=(4,),
        schedule=TrainSchedule(epochs=4, warmup_epochs=1, decay_milestones=(3,), batch_size=16),
        experiment_id="tiny",
    )
    base.update(kwargs)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def tiny():
    cfg = tiny_experiment()
    data = cfg.data.load()
    teacher, records = train_teacher(cfg, data=data)
    return cfg, data, teacher, records


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
