"""vrguard: attack and defend sensor-stream cybersickness classifiers.

Recurrent severity classifiers over multivariate sensor windows, white-box
adversarial example crafting (FGSM / PGD / C&W), Shapley-value explanation
signatures, binary attack detectors trained on those signatures, and a
closed-loop stream simulator that gates mitigation on the detector verdict.
"""

__version__ = "0.1.0"
