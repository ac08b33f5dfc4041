import sys
import os
import unittest
from unittest.mock import patch

# Get the absolute path of the parent directory
parent_dir = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))

# Add the parent directory to sys.path
sys.path.append(parent_dir)

import numpy as np
import pandas as pd

from utils import format_table, get_setting, grid_mass, kde_1d, kde_2d

class TestUtils(unittest.TestCase):

    @patch.dict(os.environ, {"MOBT_GRID_POINTS": "128"})
    def test_get_setting_from_environment(self):
        """Test that a set environment variable wins over the default and is cast."""
        self.assertEqual(get_setting("MOBT_GRID_POINTS", 256, int), 128)

    @patch.dict(os.environ, {}, clear=True)
    def test_get_setting_default(self):
        """Test that the default is used when the variable is missing."""
        self.assertEqual(get_setting("MOBT_RANK_TOL", 1e-9, float), 1e-9)

    @patch.dict(os.environ, {"MOBT_GRID_POINTS": "many"})
    def test_get_setting_bad_value(self):
        """Test that a value that cannot be cast raises ValueError naming the variable."""
        with self.assertRaisesRegex(ValueError, "MOBT_GRID_POINTS"):
            get_setting("MOBT_GRID_POINTS", 256, int)

    def test_format_table(self):
        """Test that floats are rounded to two places and missing entries print as '-'."""
        frame = pd.DataFrame({"A": [np.nan, 0.7123], "B": [0.2877, np.nan]}, index=["A", "B"])
        text = format_table(frame)
        self.assertIn("0.71", text)
        self.assertIn("0.29", text)
        self.assertIn("-", text)
        self.assertNotIn("0.7123", text)

    def test_kde_1d_normalised(self):
        """Test that the 1-D density grid integrates to one."""
        values = np.random.default_rng(1).normal(1.0, 0.5, 4000)
        grid, density = kde_1d(values, 256)
        self.assertEqual(grid.shape, (256,))
        self.assertAlmostEqual(grid_mass(density, grid), 1.0, delta=0.02)
        self.assertAlmostEqual(grid[np.argmax(density)], 1.0, delta=0.1)

    def test_kde_2d_normalised(self):
        """Test that the 2-D density grid integrates to one and is indexed [ix, iy]."""
        rng = np.random.default_rng(2)
        x = rng.normal(0.0, 1.0, 3000)
        y = rng.normal(5.0, 0.2, 3000)
        grid_x, grid_y, density = kde_2d(x, y, 64)
        self.assertEqual(density.shape, (64, 64))
        self.assertAlmostEqual(grid_mass(density, grid_x, grid_y), 1.0, delta=0.02)
        ix, iy = np.unravel_index(np.argmax(density), density.shape)
        self.assertAlmostEqual(grid_x[ix], 0.0, delta=0.3)
        self.assertAlmostEqual(grid_y[iy], 5.0, delta=0.1)

    def test_kde_rejects_constant_values(self):
        """Test that a constant sample has no density."""
        with self.assertRaises(ValueError):
            kde_1d(np.ones(10))
        with self.assertRaises(ValueError):
            kde_2d(np.ones(10), np.arange(10.0))

    def test_grid_mass(self):
        """Test the trapezoid rule on a known integral."""
        grid = np.linspace(0.0, 1.0, 1001)
        self.assertAlmostEqual(grid_mass(2 * grid, grid), 1.0, places=9)

if __name__ == "__main__":
    unittest.main()
