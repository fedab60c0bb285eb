"""Newton-Krylov solver and benchmark harness for distributed control of
stationary incompressible Navier-Stokes flow on the unit-lid cavity."""

__version__ = "0.1.0"
