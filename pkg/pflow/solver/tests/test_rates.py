import json

import numpy as np
import pytest

from core.rates import ConvergenceTable, fit_rates
from utils.error_handler import DomainError

H = 0.5 ** np.arange(2, 7)


@pytest.mark.parametrize("order", [1.0, 2.0])
def test_exact_power_laws(order):
    fit = fit_rates(H, 3.0 * H ** order)
    assert fit.slope == pytest.approx(order, abs=1e-12)
    assert fit.intercept == pytest.approx(np.log(3.0))
    np.testing.assert_allclose(fit.pairwise, order)
    assert fit.points == len(H)
    assert fit.at_least(order - 0.01)


def test_noisy_data_recovers_slope():
    rng = np.random.default_rng(7)
    errors = 2.0 * H ** 1.5 * (1.0 + 0.05 * rng.uniform(-1.0, 1.0, size=H.size))
    fit = fit_rates(H, errors)
    assert 1.4 <= fit.slope <= 1.6


def test_zero_errors_are_exact():
    fit = fit_rates(H, np.zeros_like(H))
    assert fit.exact
    assert fit.slope is None
    assert fit.at_least(10.0)
    assert fit.to_dict()['slope'] == 'exact'
    assert all(s is None for s in fit.pairwise)


def test_rows_below_floor_dropped():
    errors = H ** 2
    errors[-1] = 1e-20
    fit = fit_rates(H, errors, exact_floor=1e-15)
    assert fit.points == len(H) - 1
    assert fit.slope == pytest.approx(2.0)
    assert fit.pairwise[-1] is None


def test_single_usable_row_has_no_slope():
    fit = fit_rates(H[:3], [1.0, 0.0, 0.0])
    assert fit.slope is None and not fit.exact
    assert not fit.at_least(0.0)


@pytest.mark.parametrize("x,errors", [
    ([0.5], [1.0]),
    ([0.5, 0.25], [1.0, 0.5]),
    ([0.5, 0.25, 0.0], [1.0, 0.5, 0.25]),
    ([0.5, -0.25, 0.125], [1.0, 0.5, 0.25]),
    ([0.5, 0.25], [1.0]),
])
def test_invalid_input(x, errors):
    with pytest.raises(DomainError):
        fit_rates(x, errors)


def build_table():
    table = ConvergenceTable(['level', 'h', 'err'], meta={'kind': 'synthetic'})
    for level in (2, 0, 1):
        h = 0.5 ** (level + 1)
        table.add_row(level=level, h=h, err=h ** 2)
    return table


class TestConvergenceTable:
    def test_rows_sorted_by_level(self):
        table = build_table()
        assert [row['level'] for row in table.rows] == [0, 1, 2]
        np.testing.assert_allclose(table.column('h'), [0.5, 0.25, 0.125])

    def test_fit_registers_slope(self):
        table = build_table()
        fit = table.fit('h', 'err')
        assert table.slopes['err_vs_h'] is fit
        assert fit.slope == pytest.approx(2.0)

    def test_fit_with_transform(self):
        table = build_table()
        fit = table.fit('h', 'err', name='root', transform=np.sqrt)
        assert table.slopes['root'].slope == pytest.approx(1.0)
        assert fit.points == 3

    def test_slope_column(self):
        table = build_table()
        table.add_slope_column('h', 'err')
        frame = table.frame
        assert frame.columns[-1] == 'slope_to_prev'
        assert frame['slope_to_prev'].isna().iloc[0]
        np.testing.assert_allclose(frame['slope_to_prev'].iloc[1:].astype(float), 2.0)

    def test_unknown_column(self):
        with pytest.raises(DomainError):
            build_table().add_row(level=3, h=0.1, energy=1.0)

    def test_csv_is_deterministic(self, tmp_path):
        path = tmp_path / 'table.csv'
        text = build_table().to_csv(str(path))
        assert text.splitlines()[0] == 'level,h,err'
        assert text.splitlines()[1] == '0,5.000000000000e-01,2.500000000000e-01'
        assert path.read_bytes() == build_table().to_csv().encode()
        assert '\r' not in text

    def test_to_dict_is_json_serialisable(self):
        table = build_table()
        table.fit('h', 'err')
        payload = json.loads(json.dumps(table.to_dict()))
        assert payload['meta'] == {'kind': 'synthetic'}
        assert len(payload['rows']) == 3
        assert payload['slopes']['err_vs_h']['points'] == 3
