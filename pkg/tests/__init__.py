# Tests for robustbsde
