import pytest
import yaml
from attrs import asdict

from local_config.experiment_parameters import (
    CvConf,
    EdrConf,
    ExperimentParams,
    FlowConf,
    SphereModesConf,
    TrainConf,
)


class TestDefaults:
    def test_edr_grid(self):
        conf = EdrConf()
        assert len(conf.distributions) * len(conf.dims) * len(conf.layers) == 36
        assert conf.window == (50, 200)
        assert conf.n == 1000

    def test_sphere_modes(self):
        conf = SphereModesConf()
        assert (conf.profile, conf.d, conf.L, conf.window) == ("ntk", 3, 2, (10, 60))

    def test_every_section_present(self):
        params = ExperimentParams()
        for section in ["edr", "sphere_modes", "flow", "train", "compare", "cv"]:
            assert getattr(params, section) is not None


class TestRoundTrip:
    def test_default(self):
        params = ExperimentParams()
        assert ExperimentParams.from_dict(asdict(params)) == params

    def test_modified_through_yaml(self, tmp_path):
        params = ExperimentParams(
            seed=7,
            output_dir=str(tmp_path),
            n_workers=2,
            plot_data=True,
            edr=EdrConf(distributions=["ucube"], dims=[3], layers=[2], window=[10, 40]),
            flow=FlowConf(times=[1, 10.0], noise_sigma=0.0),
            train=TrainConf(step_size=0.01),
            cv=CvConf(M=2.5),
        )
        text = yaml.safe_dump(asdict(params), sort_keys=False)
        assert ExperimentParams.from_dict(yaml.safe_load(text)) == params

    def test_partial_dict_takes_defaults(self):
        params = ExperimentParams.from_dict({"seed": 3, "edr": {"n": 500}})
        assert params.edr.n == 500
        assert params.edr.dims == (3, 4, 5)
        assert params.flow == FlowConf()


class TestValidation:
    def test_unknown_distribution(self):
        with pytest.raises(ValueError, match="unknown distribution"):
            EdrConf(distributions=["cauchy"])

    def test_bad_window(self):
        with pytest.raises(ValueError):
            EdrConf(window=[200, 50])

    def test_bad_profile(self):
        with pytest.raises(ValueError):
            SphereModesConf(profile="gaussian")

    def test_bad_grid_ratio(self):
        with pytest.raises(ValueError):
            CvConf(Q=1.0)

    def test_unknown_key(self):
        with pytest.raises(TypeError):
            ExperimentParams.from_dict({"flow": {"sigma": 0.1}})
