"""Pavement sensor data harvesting toolkit.

Two pipelines under one roof:

* live path: a subject-based pub/sub bus (``wire``, ``broker``), a roadside
  DAQ simulator (``daqsim``), a transform/ingest connector (``connector``)
  and an embedded time-partitioned sample store (``tsstore``);
* static path: raw log parsing and feature extraction (``dsp``, ``etl``)
  emitting normalized relational CSV tables.

``cli`` exposes everything as one entry point, including an end-to-end
pipeline runner.
"""

__version__ = "0.1.0"
