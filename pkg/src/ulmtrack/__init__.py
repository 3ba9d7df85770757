"""Robot-tracked 4D ultrasound and 3D localization microscopy simulator."""
__version__ = "0.1.0"
