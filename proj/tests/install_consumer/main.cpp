#include "involution/rednet.hpp"

int main() {
  involution::InvolutionConfig c;
  c.channels = 256;
  c.kernel = 7;
  c.groups = 16;
  c.reduction = 4;
  return involution::involution_params(c) == 67472 ? 0 : 1;
}
