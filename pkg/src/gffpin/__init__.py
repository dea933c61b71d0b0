"""Disordered square-well pinning of the lattice Gaussian free field.

Subpackages map onto the pieces of the numerical laboratory:

* :mod:`gffpin.lattice`    -- boxes, edges, boundaries and reproducible disorder
* :mod:`gffpin.gaussfield` -- exact Gaussian machinery (precision, marginals, sampling)
* :mod:`gffpin.walk`       -- simple random walk Green functions and partition series
* :mod:`gffpin.pinning`    -- free-energy estimators (importance sampling, TI, oracle)
* :mod:`gffpin.bounds`     -- analytic lower bounds on the quenched critical line
* :mod:`gffpin.cli`        -- command line front end
"""

__version__ = "0.1.0"

FORMAT_VERSION = "1.0"
