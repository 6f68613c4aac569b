import pytest

from fracfield.study import StudyConfig, run_study

# published observed rates, keyed by (d, beta, functional)
PUBLISHED_RATES = {
    (1, 0.6, "abs2"): 1.396, (1, 0.7, "abs2"): 1.748, (1, 0.8, "abs2"): 1.945, (1, 0.9, "abs2"): 1.994,
    (1, 0.6, "abs3"): 1.397, (1, 0.7, "abs3"): 1.753, (1, 0.8, "abs3"): 1.949, (1, 0.9, "abs3"): 1.995,
    (1, 0.6, "abs4"): 1.398, (1, 0.7, "abs4"): 1.754, (1, 0.8, "abs4"): 1.951, (1, 0.9, "abs4"): 1.996,
    (1, 0.6, "probit:0.5:20"): 1.398, (1, 0.7, "probit:0.5:20"): 1.755,
    (1, 0.8, "probit:0.5:20"): 1.952, (1, 0.9, "probit:0.5:20"): 1.996,
    (2, 0.6, "abs2"): 0.483, (2, 0.7, "abs2"): 0.800, (2, 0.8, "abs2"): 1.139, (2, 0.9, "abs2"): 1.442,
    (2, 0.6, "abs3"): 0.442, (2, 0.7, "abs3"): 0.783, (2, 0.8, "abs3"): 1.145, (2, 0.9, "abs3"): 1.465,
    (2, 0.6, "abs4"): 0.409, (2, 0.7, "abs4"): 0.768, (2, 0.8, "abs4"): 1.143, (2, 0.9, "abs4"): 1.472,
    (2, 0.6, "probit:0.5:20"): 0.512, (2, 0.7, "probit:0.5:20"): 0.782,
    (2, 0.8, "probit:0.5:20"): 1.135, (2, 0.9, "probit:0.5:20"): 1.458,
}

# quadrature node counts per (d, interior nodes per axis) and beta = 0.6 .. 0.9
PUBLISHED_NODE_COUNTS = {
    (1, 511): (146, 226, 386, 866),
    (1, 1023): (180, 278, 476, 1069),
    (1, 2047): (218, 337, 576, 1293),
    (1, 4095): (258, 400, 685, 1538),
    (2, 15): (24, 36, 60, 133),
    (2, 31): (38, 58, 98, 218),
    (2, 63): (56, 86, 145, 325),
    (2, 127): (78, 119, 203, 453),
}


@pytest.fixture(scope="session")
def d1_study():
    return run_study(StudyConfig(d=1))


@pytest.fixture(scope="session")
def d2_study():
    return run_study(StudyConfig(d=2, meshes=(15, 31, 63)))
