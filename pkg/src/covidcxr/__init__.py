"""Three-class chest radiograph classification (control / pneumonia / COVID-19)."""

__version__ = "0.1.0"
