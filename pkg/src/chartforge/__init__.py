"""chartforge: complexity-scored chart corpus and QA synthesis pipeline."""

__version__ = "0.1.0"
