# Test package for the SPI engine
