"""Data-grid toolkit: parallel/striped file transfers over an extended FTP
control protocol, a journaled replica catalog, and a network-impairment
harness for testing both at desk scale."""

__version__ = "0.1.0"
